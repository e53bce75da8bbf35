//! Statistics of the adaptive fusion weights: per encoder depth and per
//! category. `α` weighs the conv branch, `β = 1 − α` the attention branch.

use std::fmt::Write as _;
use std::path::Path;

use crate::atomic::write_atomic;
use crate::error::{config_err, Error, Result};
use crate::fusion::{FusionKind, FusionTrace};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train::Dataset;

pub const DEFAULT_DEPTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthStat {
    pub depth: usize,
    pub mean_alpha: f64,
    /// `1 − mean_alpha`.
    pub mean_beta: f64,
    /// Population standard deviation of α.
    pub std_alpha: f64,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryStat {
    pub class: usize,
    pub mean_alpha: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaStats {
    pub per_depth: Vec<DepthStat>,
    /// `per_category[d - 1]`: classes present in the data, ascending, at depth `d`.
    pub per_category: Vec<Vec<CategoryStat>>,
}

#[derive(Default, Clone)]
struct Acc {
    sum: f64,
    sum_sq: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sum_sq += v * v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n.max(1) as f64
    }
}

/// Aggregates traces `traces[i]` of samples with `labels[i]`.
pub fn aggregate(traces: &[(Vec<FusionTrace>, Vec<usize>)], sites: usize, num_classes: usize) -> Result<AlphaStats> {
    let mut depth = vec![Vec::<f64>::new(); sites];
    let mut cat = vec![vec![Acc::default(); num_classes]; sites];
    for (batch, labels) in traces {
        for t in batch {
            let d = t.encoder_index.checked_sub(1).filter(|&d| d < sites).ok_or_else(|| {
                Error::Format(format!("fusion site {} outside 1..={sites}", t.encoder_index))
            })?;
            if t.alpha.len() != labels.len() {
                return Err(Error::Format(format!("{} weights for {} labels", t.alpha.len(), labels.len())));
            }
            for (&a, &y) in t.alpha.iter().zip(labels) {
                depth[d].push(a);
                cat[d].get_mut(y).ok_or_else(|| config_err!("label {y} ≥ {num_classes} classes"))?.push(a);
            }
        }
    }
    let per_depth = depth
        .iter()
        .enumerate()
        .map(|(d, v)| {
            let n = v.len().max(1) as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            DepthStat { depth: d + 1, mean_alpha: mean, mean_beta: 1.0 - mean, std_alpha: var.sqrt(), samples: v.len() }
        })
        .collect();
    let per_category = cat
        .iter()
        .map(|accs| {
            accs.iter()
                .enumerate()
                .filter(|(_, a)| a.n > 0)
                .map(|(class, a)| CategoryStat { class, mean_alpha: a.mean(), samples: a.n })
                .collect()
        })
        .collect();
    Ok(AlphaStats { per_depth, per_category })
}

/// Eval-mode forwards over `data`, collecting the adaptive fusion weights.
pub fn collect_alpha<T: Scalar>(model: &mut Model<T>, data: &Dataset, batch_size: usize) -> Result<AlphaStats> {
    let cfg = model.config().clone();
    if !cfg.branch.is_split() || cfg.fusion != FusionKind::Adaptive {
        return Err(Error::Unsupported(format!(
            "weight analysis needs adaptive fusion, model is {}",
            cfg.tag()
        )));
    }
    if data.is_empty() {
        return Err(config_err!("cannot analyse an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut traces = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk, None);
        traces.push((model.predict(&x)?.traces, y));
    }
    aggregate(&traces, cfg.num_fusion_sites(), data.num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Descending,
    Ascending,
}

/// Classes at `depth` ordered by mean α; ties keep ascending class order.
pub fn sort_categories(stats: &AlphaStats, depth: usize, order: Order) -> Result<Vec<CategoryStat>> {
    let mut cats = stats
        .per_category
        .get(depth.wrapping_sub(1))
        .ok_or_else(|| config_err!("depth {depth} outside 1..={}", stats.per_category.len()))?
        .clone();
    match order {
        Order::Descending => cats.sort_by(|a, b| b.mean_alpha.total_cmp(&a.mean_alpha)),
        Order::Ascending => cats.sort_by(|a, b| a.mean_alpha.total_cmp(&b.mean_alpha)),
    }
    Ok(cats)
}

pub fn render_report(stats: &AlphaStats, depth: usize) -> Result<String> {
    let cats = sort_categories(stats, depth, Order::Descending)?;
    let mut s = String::new();
    let _ = writeln!(s, "# fusion weights per encoder depth (alpha: conv branch, beta: attention branch)");
    let _ = writeln!(s, "depth\tmean_alpha_hmcb\tmean_beta_attention\tstd_alpha\tsamples");
    for d in &stats.per_depth {
        let _ = writeln!(s, "{}\t{:.9}\t{:.9}\t{:.9}\t{}", d.depth, d.mean_alpha, d.mean_beta, d.std_alpha, d.samples);
    }
    let _ = writeln!(s, "\n# per category at depth {depth}, by mean_alpha descending");
    let _ = writeln!(s, "rank\tclass\tmean_alpha_hmcb\tmean_beta_attention\tsamples");
    for (rank, c) in cats.iter().enumerate() {
        let _ = writeln!(s, "{}\t{}\t{:.9}\t{:.9}\t{}", rank + 1, c.class, c.mean_alpha, 1.0 - c.mean_alpha, c.samples);
    }
    Ok(s)
}

pub fn emit_report(stats: &AlphaStats, depth: usize, path: &Path) -> Result<()> {
    write_atomic(path, render_report(stats, depth)?.as_bytes())
}
