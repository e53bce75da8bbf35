//! Gradient verification suite: tensor ops, conv branches, fusion kinds and
//! the whole tiny model, each checked against central differences.
//!
//! Every check is a loss over values held in a [`ParamStore`] (op inputs are
//! registered as parameters too). In `f64` the differences come from the same
//! precision; in `f32` the analytic gradient comes from the `f32` tape and the
//! differences from the identical function evaluated in `f64`, since `f32`
//! rounding noise near `ε·|f|/h` swamps small coordinates at `h = 1e-4`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::branches::{ConvBranch, ConvBranchConfig, ConvBranchKind};
use crate::error::{shape_err, Result};
use crate::fusion::{Fusion, FusionConfig, FusionKind};
use crate::model::{Asf, ModelConfig};
use crate::nn::{Ctx, Init, Mode, ParamId, ParamStore};
use crate::tensor::{grad_check_coords, relative_error, Conv2dParams, NormStats, Scalar, Tape, Tensor, Tolerance, Var};
use crate::train::{synthetic_records, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> Tolerance {
        match self {
            Precision::F32 => Tolerance::F32,
            Precision::F64 => Tolerance::F64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub precision: Precision,
    pub checked: usize,
    pub max_rel_error: f64,
    /// `param[offset]` with the largest error.
    pub worst: String,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub tolerance: f64,
    /// Coordinates over the tolerance.
    pub failing: usize,
    pub max_abs_error: f64,
    /// Smallest nonzero central difference at the base point, `ulp(L) / 2h`.
    pub resolution: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub precision: Precision,
    pub seed: u64,
    /// Coordinates sampled per parameter tensor of the full model.
    pub model_coords_per_tensor: usize,
    /// Adds an op whose backward rule is deliberately wrong.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { precision: Precision::F32, seed: 0, model_coords_per_tensor: 2, inject_fault: false }
    }
}

/// A scalar loss over the values of a store, evaluated in training mode.
pub trait Probe {
    fn loss<T: Scalar>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var>;
}

/// Checks `coords` (every trainable coordinate when `None`) of `store`.
pub fn check_probe<P: Probe>(
    name: &str,
    probe: &P,
    store: &ParamStore<f64>,
    coords: Option<Vec<(ParamId, usize)>>,
    precision: Precision,
) -> Result<CheckOutcome> {
    let coords = coords.unwrap_or_else(|| {
        store
            .trainable_ids()
            .flat_map(|id| (0..store.numel(id)).map(move |k| (id, k)))
            .collect()
    });
    // values every precision can represent exactly
    let base = store.cast::<f32>().cast::<f64>();
    let analytic = match precision {
        Precision::F32 => analytic_grads(probe, &mut base.cast::<f32>(), &coords)?,
        Precision::F64 => analytic_grads(probe, &mut base.clone(), &coords)?,
    };
    let index: Vec<usize> = (0..coords.len()).collect();
    let r = grad_check_coords(&index, &analytic, precision.tolerance(), |i, delta| {
        let (id, k) = coords[i];
        let mut s = base.clone();
        let before = s.get(id).data()[k];
        s.get_mut(id).data_mut()[k] = before + delta;
        let applied = s.get(id).data()[k] - before;
        let mut ctx = Ctx::new(&mut s, Mode::Train);
        let l = probe.loss(&mut ctx)?;
        Ok((ctx.tape.value(l).item(), applied))
    })?;
    let worst = coords.get(r.worst).map_or_else(String::new, |&(id, k)| format!("{}[{k}]", store.spec(id).name));
    let tol = precision.tolerance();
    let pairs = || r.analytic.iter().zip(&r.numeric);
    let loss = {
        let mut s = base.clone();
        let mut ctx = Ctx::new(&mut s, Mode::Train);
        let l = probe.loss(&mut ctx)?;
        ctx.tape.value(l).item().abs()
    };
    Ok(CheckOutcome {
        name: name.to_string(),
        precision,
        checked: r.checked,
        max_rel_error: r.max_rel_error,
        worst,
        worst_values: (r.analytic.get(r.worst).copied().unwrap_or(0.0), r.numeric.get(r.worst).copied().unwrap_or(0.0)),
        tolerance: tol.rel_tol,
        failing: pairs().filter(|&(&a, &n)| relative_error(a, n) > tol.rel_tol).count(),
        max_abs_error: pairs().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max),
        resolution: (f64::from_bits(loss.to_bits() + 1) - loss) / (2.0 * tol.step),
    })
}

fn analytic_grads<T: Scalar, P: Probe>(probe: &P, store: &mut ParamStore<T>, coords: &[(ParamId, usize)]) -> Result<Vec<f64>> {
    let mut ctx = Ctx::new(store, Mode::Train);
    let l = probe.loss(&mut ctx)?;
    if ctx.tape.value(l).len() != 1 {
        return Err(shape_err!("probe loss is not scalar"));
    }
    let grads = ctx.param_grads(l)?;
    Ok(coords
        .iter()
        .map(|&(id, k)| grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k].as_f64()))
        .collect())
}

/// Fixed pseudo-random weights `w` of the projection `Σ w ⊙ y`, so every
/// output coordinate enters the loss with its own sign and scale.
pub fn project<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = tape.constant(Tensor::from_fn(&shape, |_| T::of(rng.random_range(-1.0f32..1.0) as f64)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Adds uniform noise to every trainable value, so zero-initialized tensors
/// (gate output layer, biases) and unit norm scales carry generic gradients.
pub fn jitter(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Matmul,
    Conv(Conv2dParams),
    Unfold { k: usize, stride: usize, padding: usize },
    Add,
    Mul,
    Affine,
    ScaleRows,
    Gelu,
    Sigmoid,
    Softmax(usize),
    Mean(usize),
    LayerNorm,
    BatchNorm,
    CrossEntropy(Vec<usize>),
    Shapes,
    /// `x²` with backward `g·x` instead of `2·g·x`.
    Faulty,
}

struct OpProbe {
    op: Op,
    inputs: Vec<ParamId>,
}

impl Probe for OpProbe {
    fn loss<T: Scalar>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let v: Vec<Var> = self.inputs.iter().map(|&id| ctx.param(id)).collect();
        let t = &mut ctx.tape;
        let y = match &self.op {
            Op::Matmul => t.matmul(v[0], v[1])?,
            Op::Conv(p) => t.conv2d(v[0], v[1], Some(v[2]), *p)?,
            Op::Unfold { k, stride, padding } => t.unfold(v[0], *k, *stride, *padding)?,
            Op::Add => t.add(v[0], v[1])?,
            Op::Mul => t.mul(v[0], v[1])?,
            Op::Affine => t.affine(v[0], T::of(-1.5), T::of(0.25))?,
            Op::ScaleRows => t.scale_rows(v[0], v[1])?,
            Op::Gelu => t.gelu(v[0])?,
            Op::Sigmoid => t.sigmoid(v[0])?,
            Op::Softmax(axis) => t.softmax(v[0], *axis)?,
            Op::Mean(axis) => t.mean(v[0], *axis)?,
            Op::LayerNorm => t.layernorm(v[0], v[1], v[2], 1e-5)?,
            Op::BatchNorm => {
                let c = t.shape(v[1])[0];
                let (mut m, mut var) = (vec![T::zero(); c], vec![T::one(); c]);
                let stats = NormStats::Train { running_mean: &mut m, running_var: &mut var, momentum: 0.1 };
                t.batchnorm(v[0], v[1], v[2], stats, 1e-5)?
            }
            Op::CrossEntropy(labels) => return t.cross_entropy(v[0], labels),
            Op::Shapes => {
                let s = t.shape(v[0]).to_vec();
                let p = t.permute(v[0], &[2, 0, 1])?;
                let r = t.reshape(p, &[s[2] * s[0], s[1]])?;
                let tr = t.transpose(r, 0, 1)?;
                let parts = t.split(tr, 1, &[1, s[2] * s[0] - 1])?;
                let n = t.narrow(parts[1], 0, 1, s[1] - 1)?;
                let flat = t.reshape(n, &[(s[1] - 1) * (s[2] * s[0] - 1)])?;
                let head = t.reshape(parts[0], &[s[1]])?;
                t.concat(&[flat, head], 0)?
            }
            Op::Faulty => {
                let value = t.value(v[0]).map(|a| a * a);
                t.custom(
                    &[v[0]],
                    value,
                    Box::new(|a| vec![Some(a.grad.zip_map(a.inputs[0], |g, x| g * x))]),
                    "faulty_square",
                )?
            }
        };
        project(t, y)
    }
}

fn op_store(shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> =
        shapes.iter().enumerate().map(|(i, s)| store.register(format!("input{i}"), s, Init::Zeros)).collect();
    store.materialize(0);
    for &id in &ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    (store, ids)
}

fn draw(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// One op at one random small shape: its name, inputs and probe.
fn op_case(name: &str, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, OpProbe) {
    let (op, shapes): (Op, Vec<Vec<usize>>) = match name {
        "matmul" => {
            let (b, m, k, n) = (draw(rng, 1, 3), draw(rng, 1, 4), draw(rng, 1, 4), draw(rng, 1, 4));
            (Op::Matmul, vec![vec![b, m, k], vec![k, n]])
        }
        "conv2d" => {
            let (g, ci, co) = (draw(rng, 1, 2), draw(rng, 1, 2), draw(rng, 1, 2));
            let k = [1, 3][draw(rng, 0, 1)];
            let p = Conv2dParams { stride: draw(rng, 1, 2), padding: k / 2, groups: g };
            (Op::Conv(p), vec![vec![2, g * ci, draw(rng, 3, 5), draw(rng, 3, 5)], vec![g * co, ci, k, k], vec![g * co]])
        }
        "conv2d_depthwise" => {
            let c = draw(rng, 1, 4);
            let p = Conv2dParams { stride: 1, padding: 1, groups: c };
            (Op::Conv(p), vec![vec![2, c, draw(rng, 2, 4), draw(rng, 2, 4)], vec![c, 1, 3, 3], vec![c]])
        }
        "unfold" => {
            let k = draw(rng, 1, 3);
            let op = Op::Unfold { k, stride: draw(rng, 1, k), padding: draw(rng, 0, 1) };
            (op, vec![vec![1, draw(rng, 1, 3), draw(rng, 3, 6), draw(rng, 3, 6)]])
        }
        "add_broadcast" => {
            let (a, b, c) = (draw(rng, 1, 3), draw(rng, 1, 4), draw(rng, 1, 4));
            (Op::Add, vec![vec![a, b, c], vec![b, c]])
        }
        "mul" => {
            let s = vec![draw(rng, 1, 4), draw(rng, 1, 4)];
            (Op::Mul, vec![s.clone(), s])
        }
        "affine" => (Op::Affine, vec![vec![draw(rng, 1, 4), draw(rng, 1, 5)]]),
        "scale_rows" => {
            let b = draw(rng, 1, 4);
            (Op::ScaleRows, vec![vec![b, draw(rng, 1, 3), draw(rng, 1, 4)], vec![b]])
        }
        "gelu" => (Op::Gelu, vec![vec![draw(rng, 1, 4), draw(rng, 1, 5)]]),
        "sigmoid" => (Op::Sigmoid, vec![vec![draw(rng, 1, 4), draw(rng, 1, 5)]]),
        "softmax" => (Op::Softmax(draw(rng, 0, 2)), vec![vec![draw(rng, 1, 3), draw(rng, 1, 4), draw(rng, 2, 4)]]),
        "mean" => (Op::Mean(draw(rng, 0, 2)), vec![vec![draw(rng, 1, 3), draw(rng, 1, 4), draw(rng, 1, 4)]]),
        "layernorm" => {
            let d = draw(rng, 2, 5);
            (Op::LayerNorm, vec![vec![draw(rng, 1, 3), draw(rng, 1, 3), d], vec![d], vec![d]])
        }
        "batchnorm" => {
            let c = draw(rng, 1, 3);
            (Op::BatchNorm, vec![vec![draw(rng, 2, 3), c, draw(rng, 2, 3)], vec![c], vec![c]])
        }
        "cross_entropy" => {
            let (b, c) = (draw(rng, 1, 4), draw(rng, 2, 5));
            (Op::CrossEntropy((0..b).map(|_| rng.random_range(0..c)).collect()), vec![vec![b, c]])
        }
        "shape_ops" => (Op::Shapes, vec![vec![draw(rng, 2, 3), draw(rng, 2, 4), draw(rng, 2, 3)]]),
        "faulty_square" => (Op::Faulty, vec![vec![draw(rng, 2, 4)]]),
        other => unreachable!("no op case {other}"),
    };
    let (store, inputs) = op_store(&shapes, rng);
    (store, OpProbe { op, inputs })
}

pub const OP_CASES: [&str; 16] = [
    "matmul",
    "conv2d",
    "conv2d_depthwise",
    "unfold",
    "add_broadcast",
    "mul",
    "affine",
    "scale_rows",
    "gelu",
    "sigmoid",
    "softmax",
    "mean",
    "layernorm",
    "batchnorm",
    "cross_entropy",
    "shape_ops",
];

/// Op checks: each case at three random shapes, reported as one outcome.
pub fn check_op(name: &str, precision: Precision, seed: u64) -> Result<CheckOutcome> {
    let mut worst: Option<CheckOutcome> = None;
    let (mut checked, mut failing) = (0, 0);
    for draw_seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(draw_seed));
        let (store, probe) = op_case(name, &mut rng);
        let r = check_probe(name, &probe, &store, None, precision)?;
        checked += r.checked;
        failing += r.failing;
        if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    let mut out = worst.expect("three draws");
    out.name = format!("op/{name}");
    out.checked = checked;
    out.failing = failing;
    Ok(out)
}

struct BranchProbe {
    branch: ConvBranch,
    input: ParamId,
}

impl Probe for BranchProbe {
    fn loss<T: Scalar>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let x = ctx.param(self.input);
        let y = self.branch.forward(ctx, x)?;
        project(&mut ctx.tape, y)
    }
}

/// Branch output wrt input and every parameter at C=4, H=W=3, B=2.
pub fn check_branch(kind: ConvBranchKind, precision: Precision, seed: u64) -> Result<CheckOutcome> {
    let mut store = ParamStore::new();
    let input = store.register("input", &[2, 4, 3, 3], Init::TruncNormal(1.0));
    let branch = ConvBranch::new(&mut store, "branch", ConvBranchConfig::new(kind, 4, 4))?;
    store.materialize(seed);
    jitter(&mut store, 0.1, seed + 1);
    let name = format!("branch/{kind:?}").to_lowercase();
    check_probe(&name, &BranchProbe { branch, input }, &store, None, precision)
}

struct FusionProbe {
    fusion: Fusion,
    a: ParamId,
    b: ParamId,
}

impl Probe for FusionProbe {
    fn loss<T: Scalar>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let (a, b) = (ctx.param(self.a), ctx.param(self.b));
        let f = self.fusion.forward(ctx, a, b)?;
        project(&mut ctx.tape, f.out)
    }
}

/// Fused output wrt both branches and the fusion parameters.
pub fn check_fusion(kind: FusionKind, shortcut: bool, precision: Precision, seed: u64) -> Result<CheckOutcome> {
    let mut store = ParamStore::new();
    let a = store.register("a", &[3, 4, 5], Init::TruncNormal(1.0));
    let b = store.register("b", &[3, 4, 5], Init::TruncNormal(1.0));
    let cfg = FusionConfig { with_shortcut: shortcut, ..FusionConfig::new(kind, 5) };
    let fusion = Fusion::new(&mut store, "fusion", cfg)?;
    store.materialize(seed);
    jitter(&mut store, 0.3, seed + 1);
    let name = format!("fusion/{}/{}", kind.name(), if shortcut { "shortcut" } else { "no_shortcut" });
    check_probe(&name, &FusionProbe { fusion, a, b }, &store, None, precision)
}

/// Up to `per_tensor` distinct random coordinates of every trainable tensor.
pub fn sample_coords<T: Scalar>(store: &ParamStore<T>, per_tensor: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    ids.into_iter()
        .flat_map(|id| {
            let n = store.numel(id);
            sample(&mut rng, n, per_tensor.min(n)).into_iter().map(move |k| (id, k)).collect::<Vec<_>>()
        })
        .collect()
}

struct ModelProbe {
    arch: Asf,
    images: Tensor<f64>,
    labels: Vec<usize>,
}

impl Probe for ModelProbe {
    fn loss<T: Scalar>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let x = ctx.input(self.images.cast());
        let logits = self.arch.forward(ctx, x)?;
        ctx.tape.cross_entropy(logits, &self.labels)
    }
}

/// Cross-entropy of the whole model on a batch of two synthetic images,
/// sampled coordinates of every trainable tensor.
pub fn check_model(cfg: &ModelConfig, precision: Precision, seed: u64, per_tensor: usize) -> Result<CheckOutcome> {
    let mut store = ParamStore::new();
    let arch = Asf::build(cfg, &mut store)?;
    store.materialize(seed);
    jitter(&mut store, 0.02, seed + 1);
    let data = Dataset::from_records(&synthetic_records(2, cfg.num_classes, seed), cfg.num_classes);
    let (images, labels) = data.batch::<f64>(&[0, 1], None);
    let coords = sample_coords(&store, per_tensor, seed);
    let probe = ModelProbe { arch, images, labels };
    check_probe(&format!("model/{}", cfg.tag()), &probe, &store, Some(coords), precision)
}

/// The full suite in a fixed order; `on_result` sees each outcome as it
/// completes.
pub fn run_suite(opts: &SuiteOptions, mut on_result: impl FnMut(&CheckOutcome)) -> Result<Vec<CheckOutcome>> {
    let p = opts.precision;
    let mut out = Vec::new();
    let mut push = |r: CheckOutcome| {
        on_result(&r);
        out.push(r);
    };
    for name in OP_CASES {
        push(check_op(name, p, opts.seed)?);
    }
    if opts.inject_fault {
        push(check_op("faulty_square", p, opts.seed)?);
    }
    for kind in [ConvBranchKind::Hmcb, ConvBranchKind::Pcm, ConvBranchKind::Bottleneck] {
        push(check_branch(kind, p, opts.seed)?);
    }
    for kind in [FusionKind::Simple, FusionKind::ContextAgnostic, FusionKind::Adaptive] {
        push(check_fusion(kind, true, p, opts.seed)?);
    }
    push(check_fusion(FusionKind::Adaptive, false, p, opts.seed)?);
    push(check_model(&ModelConfig::tiny(), p, opts.seed, opts.model_coords_per_tensor)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faulty_rule_is_caught_in_both_precisions() {
        for p in [Precision::F32, Precision::F64] {
            assert!(!check_op("faulty_square", p, 0).unwrap().passed());
        }
    }

    #[test]
    fn every_op_case_builds() {
        for name in OP_CASES {
            let (store, probe) = op_case(name, &mut ChaCha8Rng::seed_from_u64(1));
            let mut s = store.clone();
            let mut ctx = Ctx::new(&mut s, Mode::Train);
            probe.loss(&mut ctx).unwrap();
        }
    }

    #[test]
    fn sampled_coords_are_distinct_and_bounded() {
        let mut store = ParamStore::<f64>::new();
        store.register("a", &[3], Init::Zeros);
        store.register("b", &[10, 10], Init::Zeros);
        store.buffer("c", &[5], Init::Zeros);
        let c = sample_coords(&store, 4, 0);
        assert_eq!(c.len(), 3 + 4);
        let mut b: Vec<usize> = c.iter().filter(|(id, _)| id.index() == 1).map(|&(_, k)| k).collect();
        b.dedup();
        assert_eq!(b.len(), 4);
    }
}
