use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::grouping::SigmaScope;
use crate::grouping::GroupingConfig;

/// How the two branches are combined into class scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    AllFeatures,
    PartFeatures,
    AllTokens,
    #[default]
    PartTokens,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [
        Fusion::AllFeatures,
        Fusion::PartFeatures,
        Fusion::AllTokens,
        Fusion::PartTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::AllFeatures => "all_features",
            Fusion::PartFeatures => "part_features",
            Fusion::AllTokens => "all_tokens",
            Fusion::PartTokens => "part_tokens",
        }
    }

    /// Token modes read class tokens; feature modes pool patch tokens.
    pub fn uses_tokens(self) -> bool {
        matches!(self, Fusion::AllTokens | Fusion::PartTokens)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classify,
    Segment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub task: Task,
    pub n_input: usize,
    pub d0: usize,
    pub d_ratio: usize,
    pub k: usize,
    pub stages: usize,
    pub heads: usize,
    pub layers: usize,
    pub fusion: Fusion,
    pub num_classes: usize,
    pub sigma_scope: SigmaScope,
    /// Replace cross-attention with per-branch self-attention.
    pub msa_baseline: bool,
    /// Give the self-attention baseline a position-wise feed-forward sublayer.
    pub msa_ffn: bool,
    /// Linear head merge after multi-head attention.
    pub msa_out_proj: bool,
    /// Add per-branch cross-entropy terms in the two `part_*` modes.
    pub aux_branch_loss: bool,
    pub n_parts: usize,
    pub n_categories: usize,
    pub label_dim: usize,
    pub seg_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Classify,
            n_input: 1024,
            d0: 32,
            d_ratio: 2,
            k: 32,
            stages: 4,
            heads: 4,
            layers: 2,
            fusion: Fusion::PartTokens,
            num_classes: 40,
            sigma_scope: SigmaScope::PerSample,
            msa_baseline: false,
            msa_ffn: true,
            msa_out_proj: true,
            aux_branch_loss: false,
            n_parts: 50,
            n_categories: 16,
            label_dim: 64,
            seg_hidden: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration sized for a laptop.
    pub fn desk() -> Self {
        ModelConfig {
            n_input: 256,
            d0: 16,
            k: 8,
            heads: 2,
            layers: 1,
            num_classes: 3,
            ..Default::default()
        }
    }

    pub fn grouping(&self) -> GroupingConfig {
        GroupingConfig {
            d0: self.d0,
            d_ratio: self.d_ratio,
            k: self.k,
            stages: self.stages,
            sigma_scope: self.sigma_scope,
        }
    }

    /// `(points, channels)` of the large and small branches.
    pub fn branch_shapes(&self) -> ((usize, usize), (usize, usize)) {
        let s = self.grouping().stage_shapes(self.n_input);
        (s[s.len() - 2], s[s.len() - 1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages < 2 {
            return bad(format!("stages must be at least 2, got {}", self.stages));
        }
        if self.d0 == 0 || self.k == 0 || self.d_ratio == 0 {
            return bad("d0, k and d_ratio must be positive".into());
        }
        if self.heads == 0 || self.layers == 0 {
            return bad("heads and layers must be positive".into());
        }
        let div = self
            .d_ratio
            .checked_pow(self.stages as u32)
            .filter(|&m| m <= self.n_input);
        match div {
            Some(m) if self.n_input % m == 0 => {}
            _ => {
                return bad(format!(
                    "n_input={} must be divisible by d_ratio^stages = {}^{}",
                    self.n_input, self.d_ratio, self.stages
                ))
            }
        }
        let ((_, cl), (_, cs)) = self.branch_shapes();
        for c in [cl, cs] {
            if c % self.heads != 0 {
                return bad(format!(
                    "branch width {c} must be divisible by heads={}",
                    self.heads
                ));
            }
        }
        match self.task {
            Task::Classify if self.num_classes == 0 => bad("num_classes must be positive".into()),
            Task::Segment if self.n_parts == 0 || self.n_categories == 0 || self.label_dim == 0 => {
                bad("n_parts, n_categories and label_dim must be positive".into())
            }
            _ => Ok(()),
        }
    }
}
