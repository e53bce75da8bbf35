use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// One AdamW update of a flat parameter slice at step `t` (1-based):
/// decoupled decay `p ← p − lr·wd·p`, then the bias-corrected Adam step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Scalar>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, wd: f64, cfg: &AdamWConfig) -> Result<()> {
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i].as_f64();
        let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
        let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let decayed = p[i].as_f64() - lr * wd * p[i].as_f64();
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        p[i] = T::of(decayed - step);
    }
    Ok(())
}

/// AdamW over the trainable entries of a [`ParamStore`]. Weight decay applies
/// to tensors of rank ≥ 2 (weights), not to biases, norms or scalars.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || store.specs().iter().map(|s| Tensor::zeros(&s.shape)).collect::<Vec<_>>();
        AdamW { cfg, t: 0, m: zeros(), v: zeros() }
    }

    /// `grads[i]` belongs to parameter `i`; `None` means the parameter was
    /// not used and is left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let spec = store.spec(id);
            if spec.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else { continue };
            let wd = if spec.shape.len() >= 2 { self.cfg.weight_decay } else { 0.0 };
            let i = id.index();
            adamw_step(
                store.get_mut(id).data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.t,
                lr,
                wd,
                &self.cfg,
            )
            .map_err(|_| Error::NonFinite(format!("gradient of {}", store.spec(id).name)))?;
        }
        Ok(())
    }
}

/// Linear warmup reaching `lr0` after `warmup` steps, then cosine decay to
/// zero at `total`.
pub fn cosine_lr(t: usize, total: usize, warmup: usize, lr0: f64) -> f64 {
    if t < warmup {
        return lr0 * (t + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr0;
    }
    let progress = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update<T: Scalar>(shadow: &mut [T], params: &[T], decay: f64) {
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = T::of(decay * s.as_f64() + (1.0 - decay) * p.as_f64());
    }
}
