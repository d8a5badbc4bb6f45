//! Multiply-accumulate and parameter accounting.
//!
//! A MAC is one scalar multiply-add. Linear maps cost `rows · cin · cout`,
//! attention costs `queries · keys · width` for the scores and the same again
//! for the weighted sum, interpolation costs `rows · fan · width`. Norms,
//! activations, pooling and elementwise affines count as zero.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::geometry::PointCloud;
use crate::model::{Fusion, Model, ModelConfig, Task};
use crate::numerics::{Graph, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    /// Cross-attention between the branches.
    Cross,
    /// Per-branch self-attention baseline.
    SelfAttn,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub macs: u64,
    pub params: u64,
    pub macs_by_module: BTreeMap<String, u64>,
    pub params_by_module: BTreeMap<String, u64>,
}

pub fn linear_macs(rows: usize, cin: usize, cout: usize) -> u64 {
    (rows * cin * cout) as u64
}

/// `Q·Kᵀ` only.
pub fn attention_score_macs(queries: usize, keys: usize, width: usize) -> u64 {
    (queries * keys * width) as u64
}

/// Scores plus the weighted sum of values.
pub fn attention_macs(queries: usize, keys: usize, width: usize) -> u64 {
    2 * attention_score_macs(queries, keys, width)
}

fn mlp_macs(rows: usize, c: usize, out: usize) -> u64 {
    let h = (c / 2).max(1);
    linear_macs(rows, c, h) + linear_macs(rows, h, out)
}

/// One direction of a cross-attention layer whose other branch has `n_other` patches.
pub fn cross_direction_macs(c_self: usize, c_other: usize, n_other: usize, merge: bool) -> u64 {
    let keys = n_other + 1;
    linear_macs(1, c_self, c_other)
        + linear_macs(1, c_other, c_other)
        + 2 * linear_macs(keys, c_other, c_other)
        + attention_macs(1, keys, c_other)
        + if merge { linear_macs(1, c_other, c_other) } else { 0 }
        + linear_macs(1, c_other, c_self)
}

/// Self-attention over `n + 1` tokens of width `c`, with the optional feed-forward.
pub fn msa_branch_macs(c: usize, n: usize, merge: bool, ffn: bool) -> u64 {
    let t = n + 1;
    3 * linear_macs(t, c, c)
        + attention_macs(t, t, c)
        + if merge { linear_macs(t, c, c) } else { 0 }
        + if ffn { linear_macs(t, c, 4 * c) + linear_macs(t, 4 * c, c) } else { 0 }
}

/// One full mixing layer (both branches) under `mode`.
pub fn layer_macs(cfg: &ModelConfig, mode: AttnMode) -> u64 {
    let ((nl, cl), (ns, cs)) = cfg.branch_shapes();
    match mode {
        AttnMode::Cross => {
            cross_direction_macs(cl, cs, ns, cfg.msa_out_proj)
                + cross_direction_macs(cs, cl, nl, cfg.msa_out_proj)
        }
        AttnMode::SelfAttn => {
            msa_branch_macs(cl, nl, cfg.msa_out_proj, cfg.msa_ffn)
                + msa_branch_macs(cs, ns, cfg.msa_out_proj, cfg.msa_ffn)
        }
    }
}

/// Closed-form per-module MACs of one classification forward pass.
pub fn analytic_macs(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    m.insert("embed".to_string(), linear_macs(cfg.n_input, 3, cfg.d0));
    let (mut n_p, mut d) = (cfg.n_input, cfg.d0);
    for s in 0..cfg.stages {
        let n = n_p / cfg.d_ratio;
        let rows = n * cfg.k.min(n_p);
        let v = linear_macs(rows, d, 2 * d) + 2 * linear_macs(rows, 2 * d, 2 * d);
        m.insert(format!("group{s}"), v);
        (n_p, d) = (n, 2 * d);
    }
    let ((nl, cl), (_, cs)) = cfg.branch_shapes();
    if cfg.fusion.uses_tokens() {
        let mode = if cfg.msa_baseline { AttnMode::SelfAttn } else { AttnMode::Cross };
        let prefix = if cfg.msa_baseline { "msa" } else { "ca" };
        for l in 0..cfg.layers {
            m.insert(format!("{prefix}{l}"), layer_macs(cfg, mode));
        }
    }
    let c = cfg.num_classes;
    let head = match cfg.fusion {
        Fusion::PartTokens | Fusion::PartFeatures => mlp_macs(1, cl, c) + mlp_macs(1, cs, c),
        Fusion::AllTokens => mlp_macs(1, cl + cs, c),
        Fusion::AllFeatures => linear_macs(nl, cl, cs) + mlp_macs(1, cs, c),
    };
    m.insert("head".to_string(), head);
    m
}

/// MACs recorded by the graph during one forward pass on a dummy cloud.
pub fn measured_macs(model: &Model) -> Result<BTreeMap<String, u64>> {
    let n = model.cfg.n_input;
    let pts = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [t.cos() * (1.0 + t), (3.0 * t).sin(), t * t]
        })
        .collect();
    let cloud = PointCloud::new(pts)?;
    let mut g = Graph::new();
    match model.cfg.task {
        Task::Classify => {
            model.forward_classify(&mut g, &cloud)?;
        }
        Task::Segment => {
            model.forward_part_segment(&mut g, &cloud, &model.onehot(0)?)?;
        }
    }
    Ok(g.macs_by_scope().iter().filter(|(_, &v)| v > 0).map(|(k, &v)| (k.clone(), v)).collect())
}

/// Scalar parameters grouped by the first component of their name.
pub fn param_breakdown(store: &ParamStore) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for p in store.iter() {
        let module = p.id.split('.').next().unwrap_or("").to_string();
        *m.entry(module).or_insert(0) += p.value.numel() as u64;
    }
    m
}

/// Costs of the model's configuration with its attention mixer set to `mode`.
pub fn count_costs(model: &Model, mode: AttnMode) -> Result<CostReport> {
    let mut cfg = model.cfg.clone();
    cfg.msa_baseline = mode == AttnMode::SelfAttn;
    let rebuilt;
    let m = if cfg == model.cfg {
        model
    } else {
        rebuilt = Model::build(&cfg)?;
        &rebuilt
    };
    let macs_by_module = match cfg.task {
        Task::Classify => analytic_macs(&cfg),
        Task::Segment => measured_macs(m)?,
    };
    let params_by_module = param_breakdown(&m.store);
    Ok(CostReport {
        macs: macs_by_module.values().sum(),
        params: params_by_module.values().sum(),
        macs_by_module,
        params_by_module,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_linear() {
        assert_eq!(linear_macs(3, 4, 8), 96);
    }

    #[test]
    fn score_ratio_is_one_over_tokens() {
        let (t, w) = (65, 256);
        assert_eq!(attention_score_macs(t, t, w), 65 * attention_score_macs(1, t, w));
    }
}
