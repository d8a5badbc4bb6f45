//! Class tokens, the dual-branch cross-attention layer and the plain
//! self-attention layer used as a baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grouping::BranchFeatures;
use crate::numerics::layers::{LayerNorm, Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchTag {
    Large,
    Small,
}

/// A class token `[1, c]` and the patch tokens `[n, c]` of one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchTokens {
    pub tag: BranchTag,
    pub cls: Var,
    pub patch: Var,
    pub dim: usize,
    pub n: usize,
}

impl BranchTokens {
    /// `[cls; patch]`, `n + 1` rows.
    pub fn sequence(&self, g: &mut Graph) -> Result<Var> {
        g.concat_rows(&[self.cls, self.patch])
    }
}

pub fn append_class_token(
    g: &mut Graph,
    store: &ParamStore,
    feats: &BranchFeatures,
    cls: ParamId,
    tag: BranchTag,
) -> Result<BranchTokens> {
    let shape = store.value(cls).shape().to_vec();
    if shape != [1, feats.dim] {
        return Err(Error::shape("append_class_token", &shape, &[1, feats.dim]));
    }
    let cls = g.param(store, cls);
    Ok(BranchTokens {
        tag,
        cls,
        patch: feats.tokens,
        dim: feats.dim,
        n: feats.n(),
    })
}

/// Bias-free Q/K/V projections plus an optional head merge.
#[derive(Clone, Debug)]
pub struct AttnWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub merge: Option<Linear>,
    pub heads: usize,
    pub dim: usize,
}

impl AttnWeights {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        merge: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(AttnWeights {
            wq: Linear::register(store, &format!("{name}.wq"), dim, dim, false, rng)?,
            wk: Linear::register(store, &format!("{name}.wk"), dim, dim, false, rng)?,
            wv: Linear::register(store, &format!("{name}.wv"), dim, dim, false, rng)?,
            merge: if merge {
                Some(Linear::register(store, &format!("{name}.merge"), dim, dim, true, rng)?)
            } else {
                None
            },
            heads,
            dim,
        })
    }

    /// Multi-head attention of `queries` over `keys` (both `[·, dim]`).
    /// Returns the merged output and the raw attention node.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
    ) -> Result<(Var, Var)> {
        let q = self.wq.forward(g, store, queries)?;
        let k = self.wk.forward(g, store, keys)?;
        let v = self.wv.forward(g, store, keys)?;
        let a = g.attention(q, k, v, self.heads)?;
        let out = match &self.merge {
            Some(m) => m.forward(g, store, a)?,
            None => a,
        };
        Ok((out, a))
    }
}

/// One direction of a cross-attention layer.
#[derive(Clone, Debug)]
pub struct CrossAttnParams {
    pub proj_in: Linear,
    pub ln_in: LayerNorm,
    pub attn: AttnWeights,
    pub proj_out: Linear,
    pub ln_out: LayerNorm,
    pub c_self: usize,
    pub c_other: usize,
}

impl CrossAttnParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_self: usize,
        c_other: usize,
        heads: usize,
        merge: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CrossAttnParams {
            proj_in: Linear::register(store, &format!("{name}.proj_in"), c_self, c_other, true, rng)?,
            ln_in: LayerNorm::register(store, &format!("{name}.ln_in"), c_other)?,
            attn: AttnWeights::register(store, &format!("{name}.attn"), c_other, heads, merge, rng)?,
            proj_out: Linear::register(store, &format!("{name}.proj_out"), c_other, c_self, true, rng)?,
            ln_out: LayerNorm::register(store, &format!("{name}.ln_out"), c_self)?,
            c_self,
            c_other,
        })
    }
}

/// Intermediate values of one cross-attention step, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnTrace {
    pub q_tok: Var,
    pub attn: Var,
    pub attn_node: Var,
}

/// The class token of `this` queries `[q_tok; other.patch]`; patches are untouched.
pub fn cross_attention_step(
    g: &mut Graph,
    store: &ParamStore,
    this: &BranchTokens,
    other: &BranchTokens,
    p: &CrossAttnParams,
) -> Result<BranchTokens> {
    cross_attention_traced(g, store, this, other, p).map(|(t, _)| t)
}

pub fn cross_attention_traced(
    g: &mut Graph,
    store: &ParamStore,
    this: &BranchTokens,
    other: &BranchTokens,
    p: &CrossAttnParams,
) -> Result<(BranchTokens, CrossAttnTrace)> {
    if this.dim != p.c_self || other.dim != p.c_other {
        return Err(Error::shape(
            "cross_attention_step",
            &[this.dim, other.dim],
            &[p.c_self, p.c_other],
        ));
    }
    let q_tok = p.proj_in.forward(g, store, this.cls)?;
    let q_tok = p.ln_in.forward(g, store, q_tok)?;
    let seq = g.concat_rows(&[q_tok, other.patch])?;
    let (attn, attn_node) = p.attn.attend(g, store, q_tok, seq)?;
    let out = g.add(attn, q_tok)?;
    let cls = p.proj_out.forward(g, store, out)?;
    let cls = p.ln_out.forward(g, store, cls)?;
    Ok((
        BranchTokens { cls, ..*this },
        CrossAttnTrace {
            q_tok,
            attn: out,
            attn_node,
        },
    ))
}

/// Self-attention over `[cls; patch]` with a residual, no feed-forward.
pub fn msa_layer(
    g: &mut Graph,
    store: &ParamStore,
    tokens: &BranchTokens,
    p: &AttnWeights,
) -> Result<BranchTokens> {
    if tokens.dim != p.dim {
        return Err(Error::shape("msa_layer", &[tokens.n + 1, tokens.dim], &[tokens.n + 1, p.dim]));
    }
    let seq = tokens.sequence(g)?;
    let (a, _) = p.attend(g, store, seq, seq)?;
    let y = g.add(a, seq)?;
    split_sequence(g, tokens, y)
}

fn split_sequence(g: &mut Graph, like: &BranchTokens, y: Var) -> Result<BranchTokens> {
    let cls = g.slice_rows(y, 0, 1)?;
    let patch = g.slice_rows(y, 1, like.n)?;
    Ok(BranchTokens { cls, patch, ..*like })
}

/// Position-wise `y + W2·relu(W1·LN(y))` sublayer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            ln: LayerNorm::register(store, &format!("{name}.ln"), dim)?,
            mlp: Mlp::register(store, &format!("{name}.mlp"), dim, hidden, dim, rng)?,
        })
    }
}

pub fn feed_forward(
    g: &mut Graph,
    store: &ParamStore,
    tokens: &BranchTokens,
    p: &FeedForward,
) -> Result<BranchTokens> {
    let seq = tokens.sequence(g)?;
    let h = p.ln.forward(g, store, seq)?;
    let h = p.mlp.forward(g, store, h)?;
    let y = g.add(seq, h)?;
    split_sequence(g, tokens, y)
}

/// Both directions of one layer.
#[derive(Clone, Debug)]
pub struct CrossLayer {
    pub large: CrossAttnParams,
    pub small: CrossAttnParams,
}

#[derive(Clone, Debug)]
pub struct LayerStack {
    pub layers: Vec<CrossLayer>,
}

impl LayerStack {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        c_large: usize,
        c_small: usize,
        heads: usize,
        depth: usize,
        merge: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("cross-attention depth must be at least 1".into()));
        }
        let layers = (0..depth)
            .map(|l| {
                Ok(CrossLayer {
                    large: CrossAttnParams::register(
                        store,
                        &format!("ca{l}.large"),
                        c_large,
                        c_small,
                        heads,
                        merge,
                        rng,
                    )?,
                    small: CrossAttnParams::register(
                        store,
                        &format!("ca{l}.small"),
                        c_small,
                        c_large,
                        heads,
                        merge,
                        rng,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LayerStack { layers })
    }
}

/// Every layer updates both branches from the previous layer's state.
pub fn run_stack(
    g: &mut Graph,
    store: &ParamStore,
    large: BranchTokens,
    small: BranchTokens,
    stack: &LayerStack,
) -> Result<(BranchTokens, BranchTokens)> {
    let (mut l, mut s) = (large, small);
    for (i, layer) in stack.layers.iter().enumerate() {
        g.set_scope(&format!("ca{i}"));
        let nl = cross_attention_step(g, store, &l, &s, &layer.large)?;
        let ns = cross_attention_step(g, store, &s, &l, &layer.small)?;
        (l, s) = (nl, ns);
    }
    Ok((l, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(g: &mut Graph, n: usize, c: usize, seed: u64, tag: BranchTag) -> BranchTokens {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut rnd = |rows: usize| {
            let d = (0..rows * c).map(|_| r.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![rows, c], d).unwrap()
        };
        let cls = g.input(rnd(1));
        let patch = g.input(rnd(n));
        BranchTokens { tag, cls, patch, dim: c, n }
    }

    #[test]
    fn class_token_prepends_one_row() {
        let mut store = ParamStore::new();
        let cls = store.register("cls", Tensor::zeros(&[1, 4])).unwrap();
        let mut g = Graph::new();
        let t = g.input(Tensor::zeros(&[0, 4]));
        let f = BranchFeatures { points: vec![], tokens: t, dim: 4 };
        let b = append_class_token(&mut g, &store, &f, cls, BranchTag::Small).unwrap();
        let seq = b.sequence(&mut g).unwrap();
        assert_eq!(g.shape(seq), &[1, 4]);
        let f = BranchFeatures { points: vec![], tokens: t, dim: 5 };
        assert!(append_class_token(&mut g, &store, &f, cls, BranchTag::Small).is_err());
    }

    #[test]
    fn cross_step_leaves_patches_alone() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CrossAttnParams::register(&mut store, "x", 4, 8, 2, true, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = tokens(&mut g, 5, 4, 2, BranchTag::Large);
        let b = tokens(&mut g, 3, 8, 3, BranchTag::Small);
        let out = cross_attention_step(&mut g, &store, &a, &b, &p).unwrap();
        assert_eq!(out.patch, a.patch);
        assert_eq!(g.shape(out.cls), &[1, 4]);
        assert!(cross_attention_step(&mut g, &store, &b, &a, &p).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = AttnWeights::register(&mut store, "a", 10, 3, true, &mut rng).unwrap_err();
        assert!(e.to_string().contains("divisible"));
    }

    #[test]
    fn msa_single_token_is_value_plus_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttnWeights::register(&mut store, "m", 4, 2, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let t = tokens(&mut g, 0, 4, 9, BranchTag::Small);
        let out = msa_layer(&mut g, &store, &t, &p).unwrap();
        let x = g.value(t.cls).data().to_vec();
        let w = store.value(p.wv.w);
        for j in 0..4 {
            let v: f64 = (0..4).map(|i| x[i] * w.at(&[i, j])).sum();
            assert!((g.value(out.cls).data()[j] - (v + x[j])).abs() < 1e-12);
        }
    }
}
