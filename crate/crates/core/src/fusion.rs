//! Combining the convolutional output `a` and the attention output `b`:
//! `out = α·a + β·b + S` with `S = a + b` (dropped when the shortcut is off).

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{BatchNorm, Ctx, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// `α = β = 0.5`.
    Simple,
    /// Two free learned scalars per encoder.
    ContextAgnostic,
    /// Per-sample `α` from a gate over the pooled branch sum, `β = 1 − α`.
    Adaptive,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Simple => "simple",
            FusionKind::ContextAgnostic => "context_agnostic",
            FusionKind::Adaptive => "adaptive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub dim: usize,
    pub gate_hidden: usize,
    pub with_shortcut: bool,
}

impl FusionConfig {
    /// Gate hidden width defaults to `dim`.
    pub fn new(kind: FusionKind, dim: usize) -> Self {
        FusionConfig { kind, dim, gate_hidden: dim, with_shortcut: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(config_err!("fusion dim must be ≥ 1"));
        }
        if self.kind == FusionKind::Adaptive && self.gate_hidden == 0 {
            return Err(config_err!("adaptive fusion needs gate_hidden ≥ 1"));
        }
        Ok(())
    }
}

/// Fusion weights of one site for every sample of a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    /// 1-based fusion site in forward order (reduction encoders first).
    pub encoder_index: usize,
    pub alpha: Vec<f64>,
    /// `1 − alpha` for adaptive sites, the learned `W_β` for context-agnostic.
    pub beta: Vec<f64>,
}

/// `Pool → Linear → BN → GeLU → Linear → Sigmoid`. The first Linear has no bias
/// since BN cancels it; the last Linear starts at
/// zero so a fresh gate outputs exactly 0.5.
#[derive(Clone, Debug)]
pub struct Gate {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

impl Gate {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize) -> Self {
        Gate {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden),
            fc2: Linear::with_init(store, &format!("{name}.fc2"), hidden, 1, true, Init::Zeros),
        }
    }

    /// `s: [B, N, D]` → `α: [B]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, s: Var) -> Result<Var> {
        let shape = ctx.tape.shape(s).to_vec();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(shape_err!("gate expects non-empty [B, N, D], got {:?}", shape));
        }
        let pooled = ctx.tape.mean(s, 1)?;
        let h = self.fc1.forward(ctx, pooled)?;
        let h = self.bn.forward(ctx, h)?;
        let h = ctx.tape.gelu(h)?;
        let z = self.fc2.forward(ctx, h)?;
        let alpha = ctx.tape.sigmoid(z)?;
        ctx.tape.reshape(alpha, &[shape[0]])
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.bn.params());
        p.extend(self.fc2.params());
        p
    }

    /// Per-sample cost of the two Linears.
    pub fn macs(&self) -> u64 {
        self.fc1.macs(1) + self.fc2.macs(1)
    }
}

#[derive(Clone, Debug)]
enum Weights {
    Fixed,
    Learned { alpha: ParamId, beta: ParamId },
    Gated(Gate),
}

/// Result of [`Fusion::forward`]: the fused patch rows and the `[B]` weights
/// that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub out: Var,
    pub alpha: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    weights: Weights,
}

impl Fusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = match cfg.kind {
            FusionKind::Simple => Weights::Fixed,
            FusionKind::ContextAgnostic => Weights::Learned {
                alpha: store.register(format!("{name}.w_alpha"), &[1], Init::Const(0.5)),
                beta: store.register(format!("{name}.w_beta"), &[1], Init::Const(0.5)),
            },
            FusionKind::Adaptive => Weights::Gated(Gate::new(store, &format!("{name}.gate"), cfg.dim, cfg.gate_hidden)),
        };
        Ok(Fusion { cfg, weights })
    }

    pub fn gate(&self) -> Option<&Gate> {
        match &self.weights {
            Weights::Gated(g) => Some(g),
            _ => None,
        }
    }

    /// Fuses `a` (conv) and `b` (attention), both `[B, N, dim]`. Non-simple
    /// kinds append a [`FusionTrace`] to the context.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, a: Var, b: Var) -> Result<Fused> {
        let shape = ctx.tape.shape(a).to_vec();
        if shape != ctx.tape.shape(b) {
            return Err(shape_err!("fusion branches disagree: {:?} vs {:?}", shape, ctx.tape.shape(b)));
        }
        if shape.len() != 3 || shape[2] != self.cfg.dim {
            return Err(shape_err!("fusion expects [B, N, {}], got {:?}", self.cfg.dim, shape));
        }
        let batch = shape[0];
        let site = ctx.next_site();
        let s = ctx.tape.add(a, b)?;
        let (alpha, beta) = match &self.weights {
            Weights::Fixed => {
                let half = ctx.input(Tensor::full(&[batch], T::of(0.5)));
                (half, half)
            }
            Weights::Learned { alpha, beta } => {
                let (wa, wb) = (ctx.param(*alpha), ctx.param(*beta));
                (self.per_sample(ctx, wa, batch)?, self.per_sample(ctx, wb, batch)?)
            }
            Weights::Gated(g) => {
                let alpha = g.forward(ctx, s)?;
                let beta = ctx.tape.affine(alpha, -T::one(), T::one())?;
                (alpha, beta)
            }
        };
        let wa = ctx.tape.scale_rows(a, alpha)?;
        let wb = ctx.tape.scale_rows(b, beta)?;
        let mut out = ctx.tape.add(wa, wb)?;
        if self.cfg.with_shortcut {
            out = ctx.tape.add(out, s)?;
        }
        if self.cfg.kind != FusionKind::Simple {
            let alpha_v: Vec<f64> = ctx.tape.value(alpha).data().iter().map(|v| v.as_f64()).collect();
            let beta_v = match self.cfg.kind {
                FusionKind::Adaptive => alpha_v.iter().map(|a| 1.0 - a).collect(),
                _ => ctx.tape.value(beta).data().iter().map(|v| v.as_f64()).collect(),
            };
            ctx.record(FusionTrace { encoder_index: site, alpha: alpha_v, beta: beta_v });
        }
        Ok(Fused { out, alpha, beta })
    }

    /// Fuses rows that only the attention branch produced (conv term zero):
    /// `β·c + c`, or `β·c` without the shortcut. `c: [B, R, dim]`.
    pub fn fuse_attention_only<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, fused: &Fused, c: Var) -> Result<Var> {
        let wc = ctx.tape.scale_rows(c, fused.beta)?;
        if self.cfg.with_shortcut {
            ctx.tape.add(wc, c)
        } else {
            Ok(wc)
        }
    }

    fn per_sample<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, w: Var, batch: usize) -> Result<Var> {
        let zeros = ctx.input(Tensor::zeros(&[batch, 1]));
        let w = ctx.tape.add(zeros, w)?;
        ctx.tape.reshape(w, &[batch])
    }

    pub fn params(&self) -> Vec<ParamId> {
        match &self.weights {
            Weights::Fixed => Vec::new(),
            Weights::Learned { alpha, beta } => vec![*alpha, *beta],
            Weights::Gated(g) => g.params(),
        }
    }

    /// Per-sample multiply-accumulates (the gate Linears only).
    pub fn macs(&self) -> u64 {
        self.gate().map_or(0, Gate::macs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{grad_check, Tolerance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| T::of(rng.random_range(-2.0..2.0)))
    }

    fn build<T: Scalar>(kind: FusionKind, dim: usize, shortcut: bool) -> (ParamStore<T>, Fusion) {
        let mut store = ParamStore::new();
        let cfg = FusionConfig { with_shortcut: shortcut, ..FusionConfig::new(kind, dim) };
        let f = Fusion::new(&mut store, "f", cfg).unwrap();
        store.materialize(11);
        (store, f)
    }

    struct Run<T> {
        out: Tensor<T>,
        alpha: Tensor<T>,
        beta: Tensor<T>,
        traces: Vec<FusionTrace>,
    }

    fn run<T: Scalar>(store: &mut ParamStore<T>, f: &Fusion, a: &Tensor<T>, b: &Tensor<T>, mode: Mode) -> Run<T> {
        let mut ctx = Ctx::new(store, mode);
        let (av, bv) = (ctx.input(a.clone()), ctx.input(b.clone()));
        let r = f.forward(&mut ctx, av, bv).unwrap();
        Run {
            out: ctx.tape.value(r.out).clone(),
            alpha: ctx.tape.value(r.alpha).clone(),
            beta: ctx.tape.value(r.beta).clone(),
            traces: ctx.take_traces(),
        }
    }

    fn set_gate_bias<T: Scalar>(store: &mut ParamStore<T>, v: f64) {
        let id = store.find("f.gate.fc2.bias").unwrap();
        store.set(id, Tensor::full(&[1], T::of(v))).unwrap();
    }

    fn combo<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ka: f64, kb: f64) -> Tensor<f64> {
        a.cast::<f64>().zip_map(&b.cast(), |x, y| ka * x + kb * y)
    }

    fn fresh_gate_is_simple_fusion<T: Scalar>() {
        let (a, b) = (random::<T>(&[3, 5, 4], 1), random::<T>(&[3, 5, 4], 2));
        let expected = combo(&a, &b, 1.5, 1.5);
        for kind in [FusionKind::Simple, FusionKind::ContextAgnostic, FusionKind::Adaptive] {
            let (mut s, f) = build::<T>(kind, 4, true);
            for mode in [Mode::Train, Mode::Eval] {
                let r = run(&mut s, &f, &a, &b, mode);
                assert!(r.out.cast::<f64>().max_abs_diff(&expected) < 1e-6, "{kind:?}");
                assert!(r.alpha.data().iter().all(|v| v.as_f64() == 0.5));
            }
        }
    }

    #[test]
    fn fresh_gate_is_simple_fusion_f32() {
        fresh_gate_is_simple_fusion::<f32>();
    }

    #[test]
    fn fresh_gate_is_simple_fusion_f64() {
        fresh_gate_is_simple_fusion::<f64>();
    }

    #[test]
    fn saturated_gate_picks_one_branch() {
        let (a, b) = (random::<f64>(&[2, 3, 4], 3), random::<f64>(&[2, 3, 4], 4));
        for (bias, ka, kb) in [(60.0, 2.0, 1.0), (-60.0, 1.0, 2.0)] {
            let (mut s, f) = build::<f64>(FusionKind::Adaptive, 4, true);
            set_gate_bias(&mut s, bias);
            let r = run(&mut s, &f, &a, &b, Mode::Eval);
            assert!(r.out.max_abs_diff(&combo(&a, &b, ka, kb)) < 1e-6);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let (a, b) = (random::<f32>(&[4, 3, 6], 5), random::<f32>(&[4, 3, 6], 6));
        let (mut s, f) = build::<f32>(FusionKind::Adaptive, 6, true);
        let fc2 = s.find("f.gate.fc2.weight").unwrap();
        s.set(fc2, random(&[6, 1], 7)).unwrap();
        let r = run(&mut s, &f, &a, &b, Mode::Train);
        let t = &r.traces[0];
        assert!(t.alpha.iter().any(|&x| x != 0.5));
        for (x, y) in t.alpha.iter().zip(&t.beta) {
            assert!(*x > 0.0 && *x < 1.0);
            assert_eq!(x + y, 1.0);
        }
        for (x, y) in r.alpha.data().iter().zip(r.beta.data()) {
            assert!((x + y - 1.0).abs() <= f32::EPSILON);
        }
    }

    #[test]
    fn trace_is_bit_exact_copy_of_the_weights() {
        let (a, b) = (random::<f32>(&[3, 2, 4], 8), random::<f32>(&[3, 2, 4], 9));
        let (mut s, f) = build::<f32>(FusionKind::Adaptive, 4, false);
        let fc2 = s.find("f.gate.fc2.weight").unwrap();
        s.set(fc2, random(&[4, 1], 10)).unwrap();
        let r = run(&mut s, &f, &a, &b, Mode::Eval);
        assert_eq!(r.traces.len(), 1);
        assert_eq!(r.traces[0].encoder_index, 1);
        let alpha: Vec<f64> = r.alpha.data().iter().map(|v| v.as_f64()).collect();
        assert_eq!(r.traces[0].alpha, alpha);

        let (mut s, f) = build::<f32>(FusionKind::ContextAgnostic, 4, true);
        let wb = s.find("f.w_beta").unwrap();
        s.set(wb, Tensor::full(&[1], 0.8)).unwrap();
        let r = run(&mut s, &f, &a, &b, Mode::Eval);
        assert_eq!(r.traces[0].beta, vec![0.8f32 as f64; 3]);
        assert_eq!(r.traces[0].alpha, vec![0.5; 3]);

        let (mut s, f) = build::<f32>(FusionKind::Simple, 4, true);
        assert!(run(&mut s, &f, &a, &b, Mode::Eval).traces.is_empty());
    }

    #[test]
    fn simple_fusion_is_homogeneous() {
        let (a, b) = (random::<f64>(&[2, 3, 4], 11), random::<f64>(&[2, 3, 4], 12));
        let (mut s, f) = build::<f64>(FusionKind::Simple, 4, false);
        let base = run(&mut s, &f, &a, &b, Mode::Eval).out;
        let scaled = run(&mut s, &f, &a.map(|x| 3.0 * x), &b.map(|x| 3.0 * x), Mode::Eval).out;
        assert!(scaled.max_abs_diff(&base.map(|x| 3.0 * x)) < 1e-12);
        assert!(base.max_abs_diff(&combo(&a, &b, 0.5, 0.5)) < 1e-12);
    }

    /// The gate sees a mean over tokens, so permuting token rows of both
    /// branches leaves α unchanged.
    #[test]
    fn gate_ignores_token_order() {
        let (a, b) = (random::<f64>(&[2, 5, 4], 13), random::<f64>(&[2, 5, 4], 14));
        let perm = [3, 0, 4, 1, 2];
        let permute = |t: &Tensor<f64>| {
            Tensor::from_fn(&[2, 5, 4], |i| {
                let (n, r, d) = (i / 20, (i / 4) % 5, i % 4);
                t.data()[n * 20 + perm[r] * 4 + d]
            })
        };
        let (mut s, f) = build::<f64>(FusionKind::Adaptive, 4, true);
        let fc2 = s.find("f.gate.fc2.weight").unwrap();
        s.set(fc2, random(&[4, 1], 15)).unwrap();
        let x = run(&mut s, &f, &a, &b, Mode::Eval).alpha;
        let y = run(&mut s, &f, &permute(&a), &permute(&b), Mode::Eval).alpha;
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    fn attention_grad_norm(shortcut: bool) -> f64 {
        let (a, b) = (random::<f64>(&[2, 3, 4], 16), random::<f64>(&[2, 3, 4], 17));
        let (mut s, f) = build::<f64>(FusionKind::Adaptive, 4, shortcut);
        set_gate_bias(&mut s, 60.0);
        let mut ctx = Ctx::new(&mut s, Mode::Eval);
        let av = ctx.input(a);
        let bv = ctx.tape.leaf(b, true);
        let r = f.forward(&mut ctx, av, bv).unwrap();
        let loss = ctx.tape.sum(r.out).unwrap();
        ctx.tape.backward(loss).unwrap().get(bv).unwrap().norm_l2()
    }

    #[test]
    fn shortcut_keeps_attention_gradient_alive_when_gate_saturates() {
        assert!(attention_grad_norm(false) < 1e-12);
        assert!(attention_grad_norm(true) > 1.0);
    }

    #[test]
    fn attention_only_rows() {
        let (a, b) = (random::<f64>(&[2, 3, 4], 18), random::<f64>(&[2, 3, 4], 19));
        let c = random::<f64>(&[2, 1, 4], 20);
        for shortcut in [true, false] {
            let (mut s, f) = build::<f64>(FusionKind::Adaptive, 4, shortcut);
            let mut ctx = Ctx::new(&mut s, Mode::Eval);
            let (av, bv, cv) = (ctx.input(a.clone()), ctx.input(b.clone()), ctx.input(c.clone()));
            let fused = f.forward(&mut ctx, av, bv).unwrap();
            let y = f.fuse_attention_only(&mut ctx, &fused, cv).unwrap();
            let k = if shortcut { 1.5 } else { 0.5 };
            assert!(ctx.tape.value(y).max_abs_diff(&c.map(|x| k * x)) < 1e-12);
        }
    }

    #[test]
    fn gate_gradient_matches_central_differences() {
        let (mut s, f) = build::<f64>(FusionKind::Adaptive, 4, true);
        let fc2 = s.find("f.gate.fc2.weight").unwrap();
        s.set(fc2, random(&[4, 1], 21)).unwrap();
        let x = random::<f64>(&[3, 2, 4], 22);
        let w = random::<f64>(&[3], 23);
        let gate = f.gate().unwrap();
        let r = grad_check(
            |tape, v| {
                let mut store = s.clone();
                let mut ctx = Ctx::new(&mut store, Mode::Train);
                std::mem::swap(&mut ctx.tape, tape);
                let alpha = gate.forward(&mut ctx, v);
                std::mem::swap(&mut ctx.tape, tape);
                let wv = tape.constant(w.clone());
                let p = tape.mul(alpha?, wv)?;
                tape.sum(p)
            },
            &x,
            Tolerance::F64,
        )
        .unwrap();
        assert!(r.passed(), "{:.3e}", r.max_rel_error);
    }

    #[test]
    fn mismatched_branches_rejected() {
        let (mut s, f) = build::<f64>(FusionKind::Simple, 4, true);
        let mut ctx = Ctx::new(&mut s, Mode::Eval);
        let a = ctx.input(Tensor::zeros(&[2, 3, 4]));
        let b = ctx.input(Tensor::zeros(&[2, 2, 4]));
        assert!(f.forward(&mut ctx, a, b).is_err());
        let c = ctx.input(Tensor::zeros(&[2, 3, 5]));
        assert!(f.forward(&mut ctx, c, c).is_err());
    }

    #[test]
    fn learned_weights_are_two_scalars() {
        let (s, f) = build::<f32>(FusionKind::ContextAgnostic, 8, true);
        assert_eq!(f.params().iter().map(|&p| s.numel(p)).sum::<usize>(), 2);
        assert_eq!(f.macs(), 0);
    }
}
