//! Network assembly, training, evaluation and cost accounting.
//!
//! Every forward pass first sorts the input points lexicographically, so the
//! classifier is invariant to the input order and the segmenter is
//! equivariant to it, bit for bit.

mod config;
pub mod costs;
pub mod metrics;
pub mod propagate;
pub mod train;

pub use config::{Fusion, ModelConfig, SigmaScope, Task};
pub use costs::{count_costs, AttnMode, CostReport};
pub use metrics::{classification_metrics, segmentation_metrics, ClassMetrics, SegMetrics};
pub use train::{evaluate, train, EpochRecord, History, TrainConfig};

use rand::Rng as _;

use crate::attention::{
    append_class_token, feed_forward, msa_layer, run_stack, AttnWeights, BranchTag, BranchTokens,
    FeedForward, LayerStack,
};
use crate::data::stream;
use crate::error::{Error, Result};
use crate::geometry::{canonical_reindex, invert_permutation, Point, PointCloud};
use crate::grouping::{build_pyramid, GroupingParams, Pyramid};
use crate::numerics::layers::{Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// One self-attention layer of the baseline, both branches.
#[derive(Clone, Debug)]
pub struct MsaBlock {
    pub large: AttnWeights,
    pub small: AttnWeights,
    pub ffn: Option<(FeedForward, FeedForward)>,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Cross(LayerStack),
    SelfAttn(Vec<MsaBlock>),
    /// Feature fusion modes never read the class tokens.
    None,
}

#[derive(Clone, Debug)]
pub enum Head {
    PartTokens { large: Mlp, small: Mlp },
    AllTokens(Mlp),
    AllFeatures { align: Linear, head: Mlp },
    PartFeatures { large: Mlp, small: Mlp },
    Segment(SegHead),
}

#[derive(Clone, Debug)]
pub struct SegHead {
    pub label: Linear,
    /// `props[t]` lifts level `t + 1` onto level `t`.
    pub props: Vec<Linear>,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub grouping: GroupingParams,
    pub cls: Option<(ParamId, ParamId)>,
    pub mixer: Mixer,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

/// Fused logits `[1, C]` and, for the `part_*` modes, the per-branch terms.
#[derive(Clone, Copy, Debug)]
pub struct ClassifyOutput {
    pub logits: Var,
    pub branches: Option<(Var, Var)>,
}

/// Pyramid and (optionally) mixed branch tokens in canonical point order.
pub struct Encoded {
    pub perm: Vec<usize>,
    pub pyramid: Pyramid,
    pub tokens: Option<(BranchTokens, BranchTokens)>,
}

fn head_mlp<R: rand::Rng>(
    store: &mut ParamStore,
    name: &str,
    c: usize,
    out: usize,
    rng: &mut R,
) -> Result<Mlp> {
    Mlp::register(store, name, c, (c / 2).max(1), out, rng)
}

fn pool_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[1, s[0], s[1]])?;
    g.max_pool(r)
}

impl Network {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, "init", 0);
        let grouping = GroupingParams::register(store, cfg.grouping(), &mut rng)?;
        let ((_, cl), (_, cs)) = cfg.branch_shapes();
        let segment = cfg.task == Task::Segment;
        let tokens = segment || cfg.fusion.uses_tokens();
        let cls = if tokens {
            let mut init = |c: usize| {
                let v = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::new(vec![1, c], v)
            };
            let l = store.register("cls.large", init(cl)?)?;
            let s = store.register("cls.small", init(cs)?)?;
            Some((l, s))
        } else {
            None
        };
        let mixer = if !tokens {
            Mixer::None
        } else if cfg.msa_baseline {
            let blocks = (0..cfg.layers)
                .map(|l| {
                    let name = format!("msa{l}");
                    let large = AttnWeights::register(
                        store,
                        &format!("{name}.large"),
                        cl,
                        cfg.heads,
                        cfg.msa_out_proj,
                        &mut rng,
                    )?;
                    let small = AttnWeights::register(
                        store,
                        &format!("{name}.small"),
                        cs,
                        cfg.heads,
                        cfg.msa_out_proj,
                        &mut rng,
                    )?;
                    let ffn = if cfg.msa_ffn {
                        Some((
                            FeedForward::register(store, &format!("{name}.ffn_large"), cl, 4 * cl, &mut rng)?,
                            FeedForward::register(store, &format!("{name}.ffn_small"), cs, 4 * cs, &mut rng)?,
                        ))
                    } else {
                        None
                    };
                    Ok(MsaBlock { large, small, ffn })
                })
                .collect::<Result<_>>()?;
            Mixer::SelfAttn(blocks)
        } else {
            Mixer::Cross(LayerStack::register(
                store,
                cl,
                cs,
                cfg.heads,
                cfg.layers,
                cfg.msa_out_proj,
                &mut rng,
            )?)
        };
        let head = if segment {
            let label = Linear::register(store, "seg_label", cfg.n_categories, cfg.label_dim, true, &mut rng)?;
            let dims: Vec<usize> = std::iter::once(cfg.d0)
                .chain(cfg.grouping().stage_shapes(cfg.n_input).iter().map(|s| s.1))
                .collect();
            // level t leaves propagation with width dims[t + 1]
            let mut props = Vec::with_capacity(cfg.stages);
            for t in 0..cfg.stages {
                let coarse = if t + 1 == cfg.stages { dims[cfg.stages] } else { dims[t + 2] };
                props.push(Linear::register(
                    store,
                    &format!("seg_fp{t}"),
                    coarse + dims[t],
                    dims[t + 1],
                    true,
                    &mut rng,
                )?);
            }
            let width = dims[1] + 2 * cs + cfg.label_dim;
            let mlp = Mlp::register(store, "seg_head", width, cfg.seg_hidden, cfg.n_parts, &mut rng)?;
            Head::Segment(SegHead { label, props, mlp })
        } else {
            let c = cfg.num_classes;
            match cfg.fusion {
                Fusion::PartTokens => Head::PartTokens {
                    large: head_mlp(store, "head.large", cl, c, &mut rng)?,
                    small: head_mlp(store, "head.small", cs, c, &mut rng)?,
                },
                Fusion::AllTokens => Head::AllTokens(head_mlp(store, "head.all", cl + cs, c, &mut rng)?),
                Fusion::AllFeatures => Head::AllFeatures {
                    align: Linear::register(store, "head.align", cl, cs, true, &mut rng)?,
                    head: head_mlp(store, "head.all", cs, c, &mut rng)?,
                },
                Fusion::PartFeatures => Head::PartFeatures {
                    large: head_mlp(store, "head.large", cl, c, &mut rng)?,
                    small: head_mlp(store, "head.small", cs, c, &mut rng)?,
                },
            }
        };
        Ok(Network {
            grouping,
            cls,
            mixer,
            head,
        })
    }

    /// Canonical reordering, pyramid, class tokens and the attention mixer.
    pub fn encode(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        cloud: &PointCloud,
        n_input: usize,
    ) -> Result<Encoded> {
        if cloud.len() != n_input {
            return Err(Error::Size(format!(
                "model expects {n_input} points, cloud has {}",
                cloud.len()
            )));
        }
        let perm = canonical_reindex(cloud, false)?;
        let pts: Vec<Point> = perm.iter().map(|&i| cloud.coords[i]).collect();
        let pyramid = build_pyramid(g, store, &pts, &self.grouping)?;
        let tokens = match self.cls {
            None => None,
            Some((cl, cs)) => {
                g.set_scope("cls");
                let l = append_class_token(g, store, pyramid.large(), cl, BranchTag::Large)?;
                let s = append_class_token(g, store, pyramid.small(), cs, BranchTag::Small)?;
                Some(self.mix(store, g, l, s)?)
            }
        };
        Ok(Encoded {
            perm,
            pyramid,
            tokens,
        })
    }

    fn mix(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        large: BranchTokens,
        small: BranchTokens,
    ) -> Result<(BranchTokens, BranchTokens)> {
        match &self.mixer {
            Mixer::Cross(stack) => run_stack(g, store, large, small, stack),
            Mixer::SelfAttn(blocks) => {
                let (mut l, mut s) = (large, small);
                for (i, b) in blocks.iter().enumerate() {
                    g.set_scope(&format!("msa{i}"));
                    l = msa_layer(g, store, &l, &b.large)?;
                    s = msa_layer(g, store, &s, &b.small)?;
                    if let Some((fl, fs)) = &b.ffn {
                        l = feed_forward(g, store, &l, fl)?;
                        s = feed_forward(g, store, &s, fs)?;
                    }
                }
                Ok((l, s))
            }
            Mixer::None => Ok((large, small)),
        }
    }

    pub fn classify(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        cloud: &PointCloud,
        n_input: usize,
    ) -> Result<ClassifyOutput> {
        let enc = self.encode(store, g, cloud, n_input)?;
        g.set_scope("head");
        let tokens = || enc.tokens.ok_or_else(|| Error::Contract("fusion needs class tokens".into()));
        let out = match &self.head {
            Head::PartTokens { large, small } => {
                let (l, s) = tokens()?;
                let hl = large.forward(g, store, l.cls)?;
                let hs = small.forward(g, store, s.cls)?;
                ClassifyOutput {
                    logits: g.add(hl, hs)?,
                    branches: Some((hl, hs)),
                }
            }
            Head::AllTokens(head) => {
                let (l, s) = tokens()?;
                let cat = g.concat_cols(&[l.cls, s.cls])?;
                ClassifyOutput {
                    logits: head.forward(g, store, cat)?,
                    branches: None,
                }
            }
            Head::AllFeatures { align, head } => {
                let al = align.forward(g, store, enc.pyramid.large().tokens)?;
                let cat = g.concat_rows(&[al, enc.pyramid.small().tokens])?;
                let pooled = pool_rows(g, cat)?;
                ClassifyOutput {
                    logits: head.forward(g, store, pooled)?,
                    branches: None,
                }
            }
            Head::PartFeatures { large, small } => {
                let pl = pool_rows(g, enc.pyramid.large().tokens)?;
                let ps = pool_rows(g, enc.pyramid.small().tokens)?;
                let hl = large.forward(g, store, pl)?;
                let hs = small.forward(g, store, ps)?;
                ClassifyOutput {
                    logits: g.add(hl, hs)?,
                    branches: Some((hl, hs)),
                }
            }
            Head::Segment(_) => {
                return Err(Error::Contract("segmentation model cannot classify".into()))
            }
        };
        Ok(out)
    }

    /// Per-point logits `[N, n_parts]` in the input row order.
    pub fn segment(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        cloud: &PointCloud,
        category_onehot: &[f64],
        n_input: usize,
    ) -> Result<Var> {
        let Head::Segment(head) = &self.head else {
            return Err(Error::Contract("classification model cannot segment".into()));
        };
        if category_onehot.len() != head.label.cin {
            return Err(Error::shape("forward_part_segment", &[category_onehot.len()], &[head.label.cin]));
        }
        let enc = self.encode(store, g, cloud, n_input)?;
        let (_, small) = enc.tokens.ok_or_else(|| Error::Contract("segmenter needs class tokens".into()))?;
        let levels = &enc.pyramid.levels;
        let n = levels[0].n();
        g.set_scope("seg");
        let global = pool_rows(g, levels[levels.len() - 1].tokens)?;
        let onehot = g.input(Tensor::new(vec![1, category_onehot.len()], category_onehot.to_vec())?);
        let label = head.label.forward(g, store, onehot)?;
        let mut cur = levels[levels.len() - 1].tokens;
        for t in (0..levels.len() - 1).rev() {
            cur = propagate::feature_propagate(
                g,
                store,
                &levels[t + 1].points,
                cur,
                &levels[t].points,
                levels[t].tokens,
                &head.props[t],
            )?;
        }
        let parts = [global, label, small.cls]
            .iter()
            .map(|&v| g.broadcast_rows(v, n))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_cols(&[cur, parts[0], parts[1], parts[2]])?;
        let logits = head.mlp.forward(g, store, cat)?;
        let c = g.shape(logits)[1];
        g.gather_rows(logits, invert_permutation(&enc.perm), &[n, c])
    }
}

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::register(&mut store, cfg)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            net,
        })
    }

    pub fn forward_classify(&self, g: &mut Graph, cloud: &PointCloud) -> Result<ClassifyOutput> {
        self.net.classify(&self.store, g, cloud, self.cfg.n_input)
    }

    pub fn forward_part_segment(
        &self,
        g: &mut Graph,
        cloud: &PointCloud,
        category_onehot: &[f64],
    ) -> Result<Var> {
        self.net.segment(&self.store, g, cloud, category_onehot, self.cfg.n_input)
    }

    /// Fused class scores of one cloud.
    pub fn logits(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward_classify(&mut g, cloud)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    /// Row-major `[N, n_parts]` part scores of one cloud.
    pub fn part_logits(&self, cloud: &PointCloud, category: usize) -> Result<Vec<f64>> {
        let onehot = self.onehot(category)?;
        let mut g = Graph::new();
        let out = self.forward_part_segment(&mut g, cloud, &onehot)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn onehot(&self, category: usize) -> Result<Vec<f64>> {
        let n = self.cfg.n_categories;
        if category >= n {
            return Err(Error::Index(format!("category {category} >= {n}")));
        }
        let mut v = vec![0.0; n];
        v[category] = 1.0;
        Ok(v)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
