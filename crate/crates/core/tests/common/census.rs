//! Parameter counts written out by hand from the layer shapes.

use pointcat::model::{Fusion, ModelConfig, Task};

fn linear(cin: usize, cout: usize, bias: bool) -> usize {
    cin * cout + if bias { cout } else { 0 }
}

fn mlp(c: usize, out: usize) -> usize {
    let h = (c / 2).max(1);
    linear(c, h, true) + linear(h, out, true)
}

fn grouping(cfg: &ModelConfig) -> usize {
    let mut total = linear(3, cfg.d0, false);
    let mut d = cfg.d0;
    for _ in 0..cfg.stages {
        total += 2 * d + linear(d, 2 * d, true) + 2 * linear(2 * d, 2 * d, true);
        d *= 2;
    }
    total
}

fn cross_direction(c_self: usize, c_other: usize, merge: bool) -> usize {
    linear(c_self, c_other, true)
        + 2 * c_other
        + 3 * c_other * c_other
        + if merge { linear(c_other, c_other, true) } else { 0 }
        + linear(c_other, c_self, true)
        + 2 * c_self
}

fn msa_branch(c: usize, merge: bool, ffn: bool) -> usize {
    3 * c * c
        + if merge { linear(c, c, true) } else { 0 }
        + if ffn { 2 * c + linear(c, 4 * c, true) + linear(4 * c, c, true) } else { 0 }
}

pub fn mixer(cfg: &ModelConfig) -> usize {
    let ((_, cl), (_, cs)) = cfg.branch_shapes();
    let per_layer = if cfg.msa_baseline {
        msa_branch(cl, cfg.msa_out_proj, cfg.msa_ffn) + msa_branch(cs, cfg.msa_out_proj, cfg.msa_ffn)
    } else {
        cross_direction(cl, cs, cfg.msa_out_proj) + cross_direction(cs, cl, cfg.msa_out_proj)
    };
    cfg.layers * per_layer
}

/// Expected scalar parameter count of the model `cfg` describes.
pub fn expected_params(cfg: &ModelConfig) -> usize {
    let ((_, cl), (_, cs)) = cfg.branch_shapes();
    let tokens = cfg.task == Task::Segment || cfg.fusion.uses_tokens();
    let mut total = grouping(cfg);
    if tokens {
        total += cl + cs + mixer(cfg);
    }
    total += match cfg.task {
        Task::Classify => {
            let c = cfg.num_classes;
            match cfg.fusion {
                Fusion::PartTokens | Fusion::PartFeatures => mlp(cl, c) + mlp(cs, c),
                Fusion::AllTokens => mlp(cl + cs, c),
                Fusion::AllFeatures => linear(cl, cs, true) + mlp(cs, c),
            }
        }
        Task::Segment => {
            let dims: Vec<usize> = (0..=cfg.stages).map(|s| cfg.d0 << s).collect();
            let mut seg = linear(cfg.n_categories, cfg.label_dim, true);
            for t in (0..cfg.stages).rev() {
                let coarse = if t + 1 == cfg.stages { dims[cfg.stages] } else { dims[t + 2] };
                seg += linear(coarse + dims[t], dims[t + 1], true);
            }
            let width = dims[1] + 2 * cs + cfg.label_dim;
            seg + linear(width, cfg.seg_hidden, true) + linear(cfg.seg_hidden, cfg.n_parts, true)
        }
    };
    total
}
