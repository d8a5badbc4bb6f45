use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::geometry::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub shift: f64,
    /// Upper bound of the dropped fraction; 0 disables dropout.
    pub dropout_max: f64,
    /// Probability that a sample gets dropout at all.
    pub dropout_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_lo: 0.8,
            scale_hi: 1.2,
            shift: 0.2,
            dropout_max: 0.875,
            dropout_prob: 1.0,
        }
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
    /// Point indices overwritten by the first kept point.
    pub dropped: Vec<usize>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: [1.0; 3],
            shift: [0.0; 3],
            dropped: Vec::new(),
        }
    }

    pub fn sample(rng: &mut Rng, cfg: &AugmentConfig, n: usize) -> Self {
        let mut scale = [1.0; 3];
        for s in &mut scale {
            *s = if cfg.scale_hi > cfg.scale_lo {
                rng.gen_range(cfg.scale_lo..=cfg.scale_hi)
            } else {
                cfg.scale_lo
            };
        }
        let mut shift = [0.0; 3];
        for t in &mut shift {
            *t = if cfg.shift > 0.0 {
                rng.gen_range(-cfg.shift..=cfg.shift)
            } else {
                0.0
            };
        }
        let mut dropped = Vec::new();
        if cfg.dropout_max > 0.0 && n > 1 && rng.gen::<f64>() < cfg.dropout_prob {
            let ratio = rng.gen_range(0.0..cfg.dropout_max.min(1.0));
            let count = ((ratio * n as f64) as usize).min(n - 1);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            dropped = perm[..count].to_vec();
            dropped.sort_unstable();
        }
        AugmentParams {
            scale,
            shift,
            dropped,
        }
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let mut out = cloud.clone();
        if !self.dropped.is_empty() {
            let mut is_dropped = vec![false; out.len()];
            for &i in &self.dropped {
                is_dropped[i] = true;
            }
            if let Some(keep) = is_dropped.iter().position(|d| !d) {
                for &i in &self.dropped {
                    out.coords[i] = out.coords[keep];
                    if let Some(a) = &mut out.attrs {
                        let d = a.dim;
                        a.values.copy_within(keep * d..(keep + 1) * d, i * d);
                    }
                    if let Some(s) = &mut out.seg_labels {
                        s[i] = s[keep];
                    }
                }
            }
        }
        for p in &mut out.coords {
            for a in 0..3 {
                p[a] = p[a] * self.scale[a] + self.shift[a];
            }
        }
        out
    }
}

/// Anisotropic scale, translation and point dropout; `N` is preserved.
pub fn augment(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut Rng) -> PointCloud {
    AugmentParams::sample(rng, cfg, cloud.len()).apply(cloud)
}
