//! Multi-scale grouping: point embedding, normalized relative grouping with a
//! learnable shift, residual-MLP aggregation and the stage pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_search, NeighborTable, Point, SampleResult};
use crate::numerics::layers::Linear;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const GROUP_EPS: f64 = 1e-5;

/// Which entries share one σ in the relative-feature normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaScope {
    /// One σ over every group, neighbour and channel of the sample.
    #[default]
    PerSample,
    /// One σ per group.
    PerGroup,
}

/// Points and their token matrix `[n, c]`.
#[derive(Clone, Debug)]
pub struct BranchFeatures {
    pub points: Vec<Point>,
    pub tokens: Var,
    pub dim: usize,
}

impl BranchFeatures {
    pub fn n(&self) -> usize {
        self.points.len()
    }
}

/// Φ: `d → 2d`, one residual block at `2d`, ReLU.
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    pub lift: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ResidualMlp {
    pub fn register<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(ResidualMlp {
            lift: Linear::register(store, &format!("{name}.lift"), d, 2 * d, true, rng)?,
            fc1: Linear::register(store, &format!("{name}.fc1"), 2 * d, 2 * d, true, rng)?,
            fc2: Linear::register(store, &format!("{name}.fc2"), 2 * d, 2 * d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.lift.forward(g, store, x)?;
        let r = self.fc1.forward(g, store, h)?;
        let r = g.relu(r);
        let r = self.fc2.forward(g, store, r)?;
        let y = g.add(h, r)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct GroupStageParams {
    pub dim: usize,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub phi: ResidualMlp,
    pub eps: f64,
}

impl GroupStageParams {
    pub fn register<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let alpha = store.register(format!("{name}.alpha"), Tensor::filled(&[d], 1.0))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[d]))?;
        let phi = ResidualMlp::register(store, &format!("{name}.phi"), d, rng)?;
        Ok(GroupStageParams {
            dim: d,
            alpha,
            beta,
            phi,
            eps: GROUP_EPS,
        })
    }
}

/// Output of the normalization step for one stage.
#[derive(Clone, Debug)]
pub struct GroupedPatch {
    pub centers: Vec<Point>,
    /// `[n, d]` features of the centers.
    pub center_feats: Var,
    /// `[n, k, d]` relative features divided by `σ + ε`.
    pub normalized: Var,
    /// `normalized` after the per-channel shift.
    pub shifted: Var,
    /// One entry per sample, or one per group under [`SigmaScope::PerGroup`].
    pub sigma: Vec<f64>,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub d0: usize,
    pub d_ratio: usize,
    pub k: usize,
    pub stages: usize,
    pub sigma_scope: SigmaScope,
}

impl GroupingConfig {
    /// `(points, channels)` emitted by each stage for an `n`-point input.
    pub fn stage_shapes(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.stages);
        let (mut m, mut c) = (n, self.d0);
        for _ in 0..self.stages {
            m /= self.d_ratio.max(1);
            c *= 2;
            out.push((m, c));
        }
        out
    }

    /// Neighbourhood size actually used by a stage whose parent has `parent_n` points.
    pub fn effective_k(&self, parent_n: usize) -> usize {
        self.k.min(parent_n)
    }
}

#[derive(Clone, Debug)]
pub struct GroupingParams {
    pub cfg: GroupingConfig,
    pub embed: Linear,
    pub stages: Vec<GroupStageParams>,
}

impl GroupingParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        cfg: GroupingConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = Linear::register(store, "embed", 3, cfg.d0, false, rng)?;
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut d = cfg.d0;
        for s in 0..cfg.stages {
            stages.push(GroupStageParams::register(store, &format!("group{s}"), d, rng)?);
            d *= 2;
        }
        Ok(GroupingParams { cfg, embed, stages })
    }
}

fn coords_tensor(points: &[Point]) -> Tensor {
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(vec![points.len(), 3], data).expect("n x 3")
}

/// Linear projection of raw coordinates to `d0` channels.
pub fn embed_points(
    g: &mut Graph,
    store: &ParamStore,
    points: &[Point],
    embed: &Linear,
) -> Result<BranchFeatures> {
    let x = g.input(coords_tensor(points));
    let tokens = embed.forward(g, store, x)?;
    Ok(BranchFeatures {
        points: points.to_vec(),
        tokens,
        dim: embed.cout,
    })
}

pub fn group_normalize(
    g: &mut Graph,
    store: &ParamStore,
    parent: &BranchFeatures,
    centers: &SampleResult,
    nbrs: &NeighborTable,
    params: &GroupStageParams,
    scope: SigmaScope,
) -> Result<GroupedPatch> {
    let (n, k, d) = (centers.indices.len(), nbrs.k, parent.dim);
    if nbrs.rows() != n {
        return Err(Error::shape("group_normalize", &[nbrs.rows(), k], &[n, k]));
    }
    if d != params.dim {
        return Err(Error::shape("group_normalize", &[parent.n(), d], &[parent.n(), params.dim]));
    }
    let nb = g.gather_rows(parent.tokens, nbrs.idx.clone(), &[n, k, d])?;
    let rep: Vec<usize> = centers
        .indices
        .iter()
        .flat_map(|&c| std::iter::repeat(c).take(k))
        .collect();
    let ctr = g.gather_rows(parent.tokens, rep, &[n, k, d])?;
    let rel = g.sub(nb, ctr)?;
    let groups = match scope {
        SigmaScope::PerSample => 1,
        SigmaScope::PerGroup => n,
    };
    let (normalized, sigma) = g.std_normalize(rel, groups, params.eps)?;
    let alpha = g.param(store, params.alpha);
    let beta = g.param(store, params.beta);
    let shifted = g.channel_affine(normalized, alpha, beta)?;
    let center_feats = g.gather_rows(parent.tokens, centers.indices.clone(), &[n, d])?;
    Ok(GroupedPatch {
        centers: centers.indices.iter().map(|&i| parent.points[i]).collect(),
        center_feats,
        normalized,
        shifted,
        sigma,
        k,
    })
}

/// Φ per neighbour, then max over each group.
pub fn aggregate_group(
    g: &mut Graph,
    store: &ParamStore,
    patch: &GroupedPatch,
    params: &GroupStageParams,
) -> Result<BranchFeatures> {
    let (n, k, d) = (patch.centers.len(), patch.k, params.dim);
    let flat = g.reshape(patch.shifted, &[n * k, d])?;
    let h = params.phi.forward(g, store, flat)?;
    let h = g.reshape(h, &[n, k, 2 * d])?;
    let tokens = g.max_pool(h)?;
    Ok(BranchFeatures {
        points: patch.centers.clone(),
        tokens,
        dim: 2 * d,
    })
}

/// FPS, KNN, normalization and aggregation. `k` is clamped to the parent size.
pub fn run_stage(
    g: &mut Graph,
    store: &ParamStore,
    parent: &BranchFeatures,
    d_ratio: usize,
    k: usize,
    params: &GroupStageParams,
    scope: SigmaScope,
) -> Result<BranchFeatures> {
    if d_ratio == 0 {
        return Err(Error::Size("downsampling ratio must be positive".into()));
    }
    let n_out = parent.n() / d_ratio;
    if n_out < 1 {
        return Err(Error::Size(format!(
            "stage input of {} points cannot be reduced by {d_ratio}",
            parent.n()
        )));
    }
    let centers = farthest_point_sample(&parent.points, n_out)?;
    let nbrs = knn_search(&parent.points, &centers, k.min(parent.n()))?;
    let patch = group_normalize(g, store, parent, &centers, &nbrs, params, scope)?;
    aggregate_group(g, store, &patch, params)
}

/// Every stage output, finest first, with the embedding as level 0.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<BranchFeatures>,
}

impl Pyramid {
    /// Second-to-last stage: more points, fewer channels.
    pub fn large(&self) -> &BranchFeatures {
        &self.levels[self.levels.len() - 2]
    }

    /// Last stage.
    pub fn small(&self) -> &BranchFeatures {
        &self.levels[self.levels.len() - 1]
    }
}

/// Embeds `points` and runs every stage. MACs are scoped `embed` and `group{s}`.
pub fn build_pyramid(
    g: &mut Graph,
    store: &ParamStore,
    points: &[Point],
    params: &GroupingParams,
) -> Result<Pyramid> {
    let cfg = &params.cfg;
    if cfg.stages < 2 {
        return Err(Error::Config(format!("need at least 2 stages, got {}", cfg.stages)));
    }
    let need = cfg.d_ratio.checked_pow(cfg.stages as u32).unwrap_or(usize::MAX);
    if points.len() < need {
        return Err(Error::Size(format!(
            "{} points cannot feed {} stages at ratio {}",
            points.len(),
            cfg.stages,
            cfg.d_ratio
        )));
    }
    g.set_scope("embed");
    let mut levels = vec![embed_points(g, store, points, &params.embed)?];
    for (s, sp) in params.stages.iter().enumerate() {
        g.set_scope(&format!("group{s}"));
        let parent = levels.last().expect("level 0 exists");
        let next = run_stage(g, store, parent, cfg.d_ratio, cfg.k, sp, cfg.sigma_scope)?;
        levels.push(next);
    }
    Ok(Pyramid { levels })
}
