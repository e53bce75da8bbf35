use serde::{Deserialize, Serialize};

use crate::branches::ConvBranchKind;
use crate::error::{config_err, Result};
use crate::fusion::FusionKind;
use crate::nn::{SoftSplit, T2T_QKV_DIM};

/// What the encoders mix. The first three split channels between a conv
/// branch of that kind and attention; the last two keep a single path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Pcm,
    Bottleneck,
    Hmcb,
    AttentionOnly,
    HmcbOnly,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Pcm => "pcm",
            BranchKind::Bottleneck => "bottleneck",
            BranchKind::Hmcb => "hmcb",
            BranchKind::AttentionOnly => "attention_only",
            BranchKind::HmcbOnly => "hmcb_only",
        }
    }

    pub fn is_split(self) -> bool {
        self.conv_kind().is_some() && self != BranchKind::HmcbOnly
    }

    pub fn conv_kind(self) -> Option<ConvBranchKind> {
        match self {
            BranchKind::Pcm => Some(ConvBranchKind::Pcm),
            BranchKind::Bottleneck => Some(ConvBranchKind::Bottleneck),
            BranchKind::Hmcb | BranchKind::HmcbOnly => Some(ConvBranchKind::Hmcb),
            BranchKind::AttentionOnly => None,
        }
    }

    pub fn has_attention(self) -> bool {
        self != BranchKind::HmcbOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub image_size: usize,
    pub in_chans: usize,
    pub num_classes: usize,
    /// Reduction depth.
    pub l1: usize,
    /// Computation depth.
    pub l2: usize,
    /// Computation token width.
    pub dim: usize,
    /// Reduction attention width.
    pub dim_prime: usize,
    pub mlp_dim_r: usize,
    pub mlp_dim_c: usize,
    /// Head width of the computation-stage attention.
    pub head_dim: usize,
    /// Initial patch embedding followed by one soft split per reduction encoder.
    pub patch: Vec<SoftSplit>,
    pub branch: BranchKind,
    pub fusion: FusionKind,
    pub shortcut: bool,
    /// Residual bottleneck middle width over its output width.
    pub bottleneck_ratio: f64,
}

const T2T_PATCHES: [SoftSplit; 3] = [SoftSplit::new(7, 3, 2), SoftSplit::new(3, 1, 1), SoftSplit::new(3, 1, 1)];

impl ModelConfig {
    fn base_recipe(variant: &str, l2: usize, dim: usize, mlp_dim_c: usize) -> Self {
        ModelConfig {
            variant: variant.into(),
            image_size: 224,
            in_chans: 3,
            num_classes: 1000,
            l1: 2,
            l2,
            dim,
            dim_prime: T2T_QKV_DIM,
            mlp_dim_r: 64,
            mlp_dim_c,
            head_dim: 32,
            patch: T2T_PATCHES.to_vec(),
            branch: BranchKind::Hmcb,
            fusion: FusionKind::Adaptive,
            shortcut: true,
            bottleneck_ratio: 0.5,
        }
    }

    pub fn small() -> Self {
        Self::base_recipe("s", 14, 384, 1152)
    }

    pub fn base() -> Self {
        Self::base_recipe("b", 24, 512, 1536)
    }

    /// Desk-scale model for 32×32 inputs: tokens 256 → 64 → 16.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            num_classes: 10,
            patch: vec![SoftSplit::new(3, 1, 1); 3],
            ..Self::base_recipe("tiny", 4, 64, 128)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "s" | "small" => Ok(Self::small()),
            "b" | "base" => Ok(Self::base()),
            "tiny" => Ok(Self::tiny()),
            other => Err(config_err!("unknown variant `{other}` (expected s, b or tiny)")),
        }
    }

    pub fn num_fusion_sites(&self) -> usize {
        if self.branch.is_split() {
            self.l1 + self.l2
        } else {
            0
        }
    }

    pub fn has_class_token(&self) -> bool {
        self.branch != BranchKind::HmcbOnly
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(config_err!("token dim must be even and positive, got {}", self.dim));
        }
        if self.dim_prime != T2T_QKV_DIM {
            return Err(config_err!("reduction attention width is fixed at {T2T_QKV_DIM}, got {}", self.dim_prime));
        }
        if self.patch.len() != self.l1 + 1 {
            return Err(config_err!("need {} soft splits for {} reduction encoders, got {}", self.l1 + 1, self.l1, self.patch.len()));
        }
        if self.l2 == 0 || self.num_classes == 0 || self.in_chans == 0 {
            return Err(config_err!("computation depth, classes and input channels must be ≥ 1"));
        }
        if self.mlp_dim_r == 0 || self.mlp_dim_c == 0 {
            return Err(config_err!("MLP widths must be ≥ 1"));
        }
        let attn_width = if self.branch.is_split() { self.dim / 2 } else { self.dim };
        if self.head_dim == 0 || attn_width % self.head_dim != 0 {
            return Err(config_err!("attention width {attn_width} not divisible by head dim {}", self.head_dim));
        }
        if self.bottleneck_ratio.is_nan() || self.bottleneck_ratio <= 0.0 {
            return Err(config_err!("bottleneck ratio must be positive"));
        }
        self.token_trace().map(|_| ())
    }

    /// Token count and width after each tokenization stage, from the soft
    /// split arithmetic.
    pub fn token_trace(&self) -> Result<Vec<TokenStage>> {
        let mut out = Vec::new();
        let mut grid = self.patch[0].grid(self.image_size, self.image_size)?;
        let mut width = self.patch[0].out_dim(self.in_chans);
        out.push(TokenStage::new("patch_embed", grid, width));
        for i in 0..self.l1 {
            width = self.dim_prime;
            out.push(TokenStage::new(format!("reduction{}", i + 1), grid, width));
            let split = self.patch[i + 1];
            grid = split.grid(grid.0, grid.1)?;
            width = split.out_dim(width);
            out.push(TokenStage::new(format!("soft_split{}", i + 1), grid, width));
        }
        out.push(TokenStage::new("project", grid, self.dim));
        Ok(out)
    }

    /// Short human-readable tag, e.g. `s/hmcb/adaptive/shortcut`.
    pub fn tag(&self) -> String {
        if self.branch.is_split() {
            format!(
                "{}/{}/{}/{}",
                self.variant,
                self.branch.name(),
                self.fusion.name(),
                if self.shortcut { "shortcut" } else { "no-shortcut" }
            )
        } else {
            format!("{}/{}", self.variant, self.branch.name())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStage {
    pub stage: String,
    pub grid: (usize, usize),
    pub tokens: usize,
    pub dim: usize,
}

impl TokenStage {
    fn new(stage: impl Into<String>, grid: (usize, usize), dim: usize) -> Self {
        TokenStage { stage: stage.into(), grid, tokens: grid.0 * grid.1, dim }
    }
}

/// Ablation switches applied on top of a preset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub branch: Option<BranchKind>,
    pub fusion: Option<FusionKind>,
    pub shortcut: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: ModelConfig) -> Result<ModelConfig> {
        if let Some(b) = self.branch {
            cfg.branch = b;
        }
        if !cfg.branch.is_split() && (self.fusion.is_some() || self.shortcut.is_some()) {
            return Err(config_err!("fusion and shortcut settings need a split build, branch is {}", cfg.branch.name()));
        }
        if let Some(f) = self.fusion {
            cfg.fusion = f;
        }
        if let Some(s) = self.shortcut {
            cfg.shortcut = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::small(), ModelConfig::base(), ModelConfig::tiny()] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn tiny_trace() {
        let t = ModelConfig::tiny().token_trace().unwrap();
        let tokens: Vec<usize> = t.iter().map(|s| s.tokens).collect();
        assert_eq!(tokens, [256, 256, 64, 64, 16, 16]);
    }

    #[test]
    fn single_path_rejects_fusion() {
        let o = Overrides { branch: Some(BranchKind::AttentionOnly), fusion: Some(FusionKind::Simple), shortcut: None };
        assert!(o.apply(ModelConfig::small()).is_err());
        let o = Overrides { branch: Some(BranchKind::HmcbOnly), shortcut: Some(false), ..Default::default() };
        assert!(o.apply(ModelConfig::small()).is_err());
    }

    #[test]
    fn odd_dim_rejected() {
        let c = ModelConfig { dim: 65, ..ModelConfig::tiny() };
        assert!(c.validate().is_err());
    }
}
