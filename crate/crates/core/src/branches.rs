//! Convolutional branch designs for the local path of a split encoder.
//!
//! All three keep the spatial extent (stride 1, 3×3 kernels padded by 1) and
//! map `c_in` channels to `c_out`:
//!
//! * [`Hmcb`]: a leading 1×1 conv followed by three half-residual blocks of
//!   depthwise 3×3 and pointwise 1×1 convs. The skip of each block starts after
//!   the leading 1×1, so channel changes happen once at entry and the blocks
//!   stack freely.
//! * [`Pcm`]: three stacked dense 3×3 convs, no skip.
//! * [`Bottleneck`]: one residual bottleneck, 1×1 reduce, 3×3, 1×1 expand, with
//!   a 1×1 projection on the skip when the widths differ.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, ParamId, ParamStore};
use crate::tensor::{Scalar, Var};

pub const HMCB_REPEATS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvBranchKind {
    Pcm,
    Bottleneck,
    Hmcb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBranchConfig {
    pub kind: ConvBranchKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Bottleneck middle width as a fraction of `c_out`.
    pub expansion: f64,
}

impl ConvBranchConfig {
    pub const DEFAULT_BOTTLENECK_RATIO: f64 = 0.5;

    pub fn new(kind: ConvBranchKind, c_in: usize, c_out: usize) -> Self {
        ConvBranchConfig { kind, c_in, c_out, expansion: Self::DEFAULT_BOTTLENECK_RATIO }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(config_err!("conv branch channels must be ≥ 1, got {} → {}", self.c_in, self.c_out));
        }
        if self.expansion.is_nan() || self.expansion <= 0.0 {
            return Err(config_err!("conv branch expansion must be positive, got {}", self.expansion));
        }
        Ok(())
    }

    fn mid(&self) -> usize {
        ((self.c_out as f64 * self.expansion).round() as usize).max(1)
    }
}

/// Conv → BN, optionally followed by GeLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize, groups: usize) -> Self {
        ConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, k, groups, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, act: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        if act {
            ctx.tape.gelu(y)
        } else {
            Ok(y)
        }
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}

#[derive(Clone, Debug)]
pub struct HalfResidualBlock {
    pub depthwise: ConvBn,
    pub pointwise: ConvBn,
}

#[derive(Clone, Debug)]
pub struct Hmcb {
    pub entry: ConvBn,
    pub blocks: Vec<HalfResidualBlock>,
}

impl Hmcb {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ConvBranchConfig) -> Self {
        let c = cfg.c_out;
        Hmcb {
            entry: ConvBn::new(store, &format!("{name}.entry"), cfg.c_in, c, 1, 1),
            blocks: (0..HMCB_REPEATS)
                .map(|i| HalfResidualBlock {
                    depthwise: ConvBn::new(store, &format!("{name}.block{i}.dw"), c, c, 3, c),
                    pointwise: ConvBn::new(store, &format!("{name}.block{i}.pw"), c, c, 1, 1),
                })
                .collect(),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.entry.forward(ctx, x, true)?;
        for b in &self.blocks {
            let y = b.depthwise.forward(ctx, h, true)?;
            let y = b.pointwise.forward(ctx, y, false)?;
            h = ctx.tape.add(h, y)?;
        }
        Ok(h)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.entry.params();
        for b in &self.blocks {
            p.extend(b.depthwise.params());
            p.extend(b.pointwise.params());
        }
        p
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.entry.macs(h, w) + self.blocks.iter().map(|b| b.depthwise.macs(h, w) + b.pointwise.macs(h, w)).sum::<u64>()
    }
}

#[derive(Clone, Debug)]
pub struct Pcm {
    pub layers: Vec<ConvBn>,
}

impl Pcm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ConvBranchConfig) -> Self {
        Pcm {
            layers: (0..3)
                .map(|i| {
                    let c_in = if i == 0 { cfg.c_in } else { cfg.c_out };
                    ConvBn::new(store, &format!("{name}.conv{i}"), c_in, cfg.c_out, 3, 1)
                })
                .collect(),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(ctx, x, i != last)?;
        }
        Ok(x)
    }

    fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.layers.iter().map(|l| l.macs(h, w)).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
    pub projection: Option<Conv2d>,
}

impl Bottleneck {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ConvBranchConfig) -> Self {
        let mid = cfg.mid();
        Bottleneck {
            reduce: ConvBn::new(store, &format!("{name}.reduce"), cfg.c_in, mid, 1, 1),
            spatial: ConvBn::new(store, &format!("{name}.conv3x3"), mid, mid, 3, 1),
            expand: ConvBn::new(store, &format!("{name}.expand"), mid, cfg.c_out, 1, 1),
            projection: (cfg.c_in != cfg.c_out)
                .then(|| Conv2d::new(store, &format!("{name}.shortcut"), cfg.c_in, cfg.c_out, 1, 1, false)),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(ctx, x, true)?;
        let y = self.spatial.forward(ctx, y, true)?;
        let y = self.expand.forward(ctx, y, false)?;
        let skip = match &self.projection {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(y, skip)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.reduce.params();
        p.extend(self.spatial.params());
        p.extend(self.expand.params());
        p.extend(self.projection.iter().flat_map(|c| c.params()));
        p
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.reduce.macs(h, w)
            + self.spatial.macs(h, w)
            + self.expand.macs(h, w)
            + self.projection.as_ref().map_or(0, |c| c.macs(h, w))
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum BranchImpl {
    Hmcb(Hmcb),
    Pcm(Pcm),
    Bottleneck(Bottleneck),
}

/// One of the interchangeable convolutional branches.
#[derive(Clone, Debug)]
pub struct ConvBranch {
    pub cfg: ConvBranchConfig,
    inner: BranchImpl,
}

impl ConvBranch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: ConvBranchConfig) -> Result<Self> {
        cfg.validate()?;
        let inner = match cfg.kind {
            ConvBranchKind::Hmcb => BranchImpl::Hmcb(Hmcb::new(store, name, &cfg)),
            ConvBranchKind::Pcm => BranchImpl::Pcm(Pcm::new(store, name, &cfg)),
            ConvBranchKind::Bottleneck => BranchImpl::Bottleneck(Bottleneck::new(store, name, &cfg)),
        };
        Ok(ConvBranch { cfg, inner })
    }

    /// `[B, c_in, H, W]` → `[B, c_out, H, W]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.inner {
            BranchImpl::Hmcb(b) => b.forward(ctx, x),
            BranchImpl::Pcm(b) => b.forward(ctx, x),
            BranchImpl::Bottleneck(b) => b.forward(ctx, x),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match &self.inner {
            BranchImpl::Hmcb(b) => b.params(),
            BranchImpl::Pcm(b) => b.params(),
            BranchImpl::Bottleneck(b) => b.params(),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match &self.inner {
            BranchImpl::Hmcb(b) => b.macs(h, w),
            BranchImpl::Pcm(b) => b.macs(h, w),
            BranchImpl::Bottleneck(b) => b.macs(h, w),
        }
    }

    pub fn as_hmcb(&self) -> Option<&Hmcb> {
        match &self.inner {
            BranchImpl::Hmcb(b) => Some(b),
            _ => None,
        }
    }
}
