use std::fmt::Write as _;

use serde::Serialize;

use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Scalar;

use super::asf::Asf;
use super::config::TokenStage;

pub const MAC_CONVENTION: &str = "one MAC per multiply-accumulate in conv, linear and attention matmuls \
(QK^T and attn*V included), per image at the configured input size; norms, activations, softmax, \
pooling and elementwise ops excluded; params count trainable scalars only (BatchNorm running stats excluded)";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComplexityReport {
    pub model: String,
    pub image_size: usize,
    pub layers: Vec<LayerRecord>,
    pub total_params: u64,
    pub total_macs: u64,
    pub token_trace: Vec<TokenStage>,
    pub convention: &'static str,
}

impl ComplexityReport {
    /// Counts from the layer graph alone; parameter values are never read.
    pub fn of<T: Scalar>(arch: &Asf, store: &ParamStore<T>) -> Self {
        let layers: Vec<LayerRecord> = arch
            .parts()
            .into_iter()
            .map(|p| LayerRecord {
                params: p
                    .params
                    .iter()
                    .filter(|&&id| store.spec(id).kind == ParamKind::Trainable)
                    .map(|&id| store.numel(id) as u64)
                    .sum(),
                name: p.name,
                macs: p.macs,
            })
            .collect();
        ComplexityReport {
            model: arch.cfg.tag(),
            image_size: arch.cfg.image_size,
            total_params: layers.iter().map(|l| l.params).sum(),
            total_macs: layers.iter().map(|l| l.macs).sum(),
            layers,
            token_trace: arch.cfg.token_trace().expect("validated at build"),
            convention: MAC_CONVENTION,
        }
    }

    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn macs_g(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {} at {}x{}", self.model, self.image_size, self.image_size);
        let _ = writeln!(s, "\ntoken trace");
        let _ = writeln!(s, "{:<14} {:>9} {:>8} {:>6}", "stage", "grid", "tokens", "dim");
        for t in &self.token_trace {
            let _ = writeln!(s, "{:<14} {:>9} {:>8} {:>6}", t.stage, format!("{}x{}", t.grid.0, t.grid.1), t.tokens, t.dim);
        }
        let _ = writeln!(s, "\nlayers");
        let _ = writeln!(s, "{:<34} {:>12} {:>16}", "name", "params", "macs");
        for l in &self.layers {
            let _ = writeln!(s, "{:<34} {:>12} {:>16}", l.name, l.params, l.macs);
        }
        let _ = writeln!(s, "{:<34} {:>12} {:>16}", "total", self.total_params, self.total_macs);
        let _ = writeln!(s, "\nparams {:.2}M  macs {:.2}G", self.params_m(), self.macs_g());
        let _ = writeln!(s, "convention: {}", self.convention);
        s
    }
}
