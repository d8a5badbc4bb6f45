mod common;

use pointcat::attention::{msa_layer, AttnWeights, BranchTag, BranchTokens};
use pointcat::geometry::{farthest_point_sample, knn_query, knn_search};
use pointcat::grouping::{
    aggregate_group, embed_points, group_normalize, BranchFeatures, GroupStageParams, GroupedPatch, SigmaScope,
};
use pointcat::model::propagate::interpolate;
use pointcat::numerics::layers::Linear;
use pointcat::numerics::{Graph, ParamStore, Tensor};
use rand::Rng as _;

fn randomize(store: &mut ParamStore, r: &mut pointcat::data::Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.last_dim();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn fps_matches_brute_force() {
    for t in 0..100 {
        let mut r = common::rng("fps", t);
        let n = r.gen_range(1..80);
        let pts = if t % 3 == 0 {
            common::grid_points(&mut r, n, 3)
        } else {
            common::random_points(&mut r, n)
        };
        let m = r.gen_range(1..=n);
        assert_eq!(farthest_point_sample(&pts, m).unwrap().indices, common::brute_fps(&pts, m), "case {t}");
    }
}

#[test]
fn knn_matches_brute_force() {
    for t in 0..100 {
        let mut r = common::rng("knn", t);
        let n = r.gen_range(1..80);
        let pts = if t % 2 == 0 {
            common::grid_points(&mut r, n, 3)
        } else {
            common::random_points(&mut r, n)
        };
        let queries = common::random_points(&mut r, 5);
        let k = r.gen_range(1..=n);
        assert_eq!(knn_query(&pts, &queries, k).unwrap().idx, common::brute_knn(&pts, &queries, k), "case {t}");
    }
}

#[test]
fn embedding_matches_matmul() {
    let mut r = common::rng("embed", 0);
    let pts = common::random_points(&mut r, 20);
    let mut store = ParamStore::new();
    let lin = Linear::register(&mut store, "embed", 3, 6, false, &mut r).unwrap();
    let mut g = Graph::new();
    let f = embed_points(&mut g, &store, &pts, &lin).unwrap();
    let w = common::value(&store, "embed.w");
    let want: Vec<Vec<f64>> = pts.iter().map(|p| common::affine(p, &w, None, 6)).collect();
    assert!(max_diff(&rows(g.value(f.tokens)), &want) < 1e-14);
}

#[test]
fn zero_and_identity_embeddings() {
    let pts = vec![[0.5, -1.0, 2.0], [3.0, 0.25, -0.5]];
    let mut r = common::rng("embed", 1);
    let mut store = ParamStore::new();
    let lin = Linear::register(&mut store, "embed", 3, 3, false, &mut r).unwrap();
    let id = store.lookup("embed.w").unwrap();
    store.get_mut(id).value.fill(0.0);
    let mut g = Graph::new();
    let f = embed_points(&mut g, &store, &pts, &lin).unwrap();
    assert!(g.value(f.tokens).data().iter().all(|&v| v == 0.0));
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    store.get_mut(id).value.data_mut().copy_from_slice(&eye);
    let f = embed_points(&mut g, &store, &pts, &lin).unwrap();
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    assert_eq!(g.value(f.tokens).data(), &flat[..]);
}

fn stage_case(seed: u64, n: usize, k: usize, d: usize) -> (ParamStore, GroupStageParams, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut r = common::rng("phi", seed);
    let pts = common::random_points(&mut r, n * 2);
    let mut store = ParamStore::new();
    let params = GroupStageParams::register(&mut store, "s", d, &mut r).unwrap();
    randomize(&mut store, &mut r);
    let mut g = Graph::new();
    let feats: Vec<f64> = (0..pts.len() * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let tokens = g.input(Tensor::new(vec![pts.len(), d], feats).unwrap());
    let parent = BranchFeatures { points: pts.clone(), tokens, dim: d };
    let centers = farthest_point_sample(&pts, n).unwrap();
    let nbrs = knn_search(&pts, &centers, k).unwrap();
    let patch = group_normalize(&mut g, &store, &parent, &centers, &nbrs, &params, SigmaScope::PerSample).unwrap();
    let out = aggregate_group(&mut g, &store, &patch, &params).unwrap();
    let shifted = rows(g.value(patch.shifted));
    let got = rows(g.value(out.tokens));
    (store, params, shifted, got)
}

#[test]
fn aggregation_matches_loop_reference() {
    let (store, _, shifted, got) = stage_case(0, 2, 3, 4);
    let want = common::phi_max_loop(&store, "s.phi", &shifted, 3);
    assert_eq!(got.len(), 2);
    assert!(max_diff(&got, &want) < 1e-12, "{got:?} vs {want:?}");
}

#[test]
fn single_neighbour_pooling_is_identity() {
    let (store, _, shifted, got) = stage_case(1, 3, 1, 4);
    let want = common::phi_max_loop(&store, "s.phi", &shifted, 1);
    assert!(max_diff(&got, &want) < 1e-12);
}

fn pooled(store: &ParamStore, params: &GroupStageParams, groups: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let (n, k, d) = (groups.len(), groups[0].len(), params.dim);
    let mut g = Graph::new();
    let flat: Vec<f64> = groups.iter().flatten().flatten().copied().collect();
    let shifted = g.input(Tensor::new(vec![n, k, d], flat).unwrap());
    let patch = GroupedPatch {
        centers: vec![[0.0; 3]; n],
        center_feats: shifted,
        normalized: shifted,
        shifted,
        sigma: vec![1.0],
        k,
    };
    let out = aggregate_group(&mut g, store, &patch, params).unwrap();
    rows(g.value(out.tokens))
}

#[test]
fn duplicated_neighbour_rows_leave_output_unchanged() {
    let mut r = common::rng("dup", 0);
    let d = 4;
    let mut store = ParamStore::new();
    let params = GroupStageParams::register(&mut store, "s", d, &mut r).unwrap();
    randomize(&mut store, &mut r);
    let groups: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| (0..2).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()).collect())
        .collect();
    let base = pooled(&store, &params, &groups);
    let dup: Vec<Vec<Vec<f64>>> = groups.iter().map(|g| vec![g[0].clone(), g[1].clone(), g[1].clone()]).collect();
    assert_eq!(pooled(&store, &params, &dup), base);
    let swapped: Vec<Vec<Vec<f64>>> = dup.iter().map(|g| vec![g[2].clone(), g[0].clone(), g[1].clone()]).collect();
    assert_eq!(pooled(&store, &params, &swapped), base);
}

#[test]
fn interpolation_matches_inverse_distance_loop() {
    for t in 0..20 {
        let mut r = common::rng("interp", t);
        let m = r.gen_range(1..12);
        let coarse = common::random_points(&mut r, m);
        let fine = common::random_points(&mut r, 15);
        let c = 5;
        let feats: Vec<f64> = (0..coarse.len() * c).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let fv = g.input(Tensor::new(vec![coarse.len(), c], feats.clone()).unwrap());
        let y = interpolate(&mut g, &coarse, fv, &fine).unwrap();
        let fan = 3.min(coarse.len());
        let nn = common::brute_knn(&coarse, &fine, fan);
        for (i, q) in fine.iter().enumerate() {
            let idx = &nn[i * fan..(i + 1) * fan];
            let w: Vec<f64> = idx
                .iter()
                .map(|&j| {
                    let d2: f64 = (0..3).map(|a| (coarse[j][a] - q[a]).powi(2)).sum();
                    1.0 / (d2 + 1e-8)
                })
                .collect();
            let s: f64 = w.iter().sum();
            for ch in 0..c {
                let want: f64 = idx.iter().zip(&w).map(|(&j, wj)| wj / s * feats[j * c + ch]).sum();
                let got = g.value(y).data()[i * c + ch];
                assert!((got - want).abs() < 1e-12, "case {t} row {i}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn self_attention_layer_matches_loop_reference() {
    for t in 0..20 {
        let mut r = common::rng("msa", t);
        let heads = r.gen_range(1..3);
        let d = heads * r.gen_range(1..4);
        let n = r.gen_range(1..6);
        let merge = t % 2 == 1;
        let mut store = ParamStore::new();
        let p = AttnWeights::register(&mut store, "m", d, heads, merge, &mut r).unwrap();
        randomize(&mut store, &mut r);
        let seq: Vec<Vec<f64>> = (0..=n).map(|_| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let mut g = Graph::new();
        let tokens = BranchTokens {
            tag: BranchTag::Small,
            cls: g.input(Tensor::new(vec![1, d], seq[0].clone()).unwrap()),
            patch: g.input(Tensor::new(vec![n, d], seq[1..].concat()).unwrap()),
            dim: d,
            n,
        };
        let out = msa_layer(&mut g, &store, &tokens, &p).unwrap();
        let lin = |name: &str, x: &[f64], bias: bool| common::linear_named(&store, name, x, d, bias);
        let keys: Vec<Vec<f64>> = seq.iter().map(|s| lin("m.wk", s, false)).collect();
        let vals: Vec<Vec<f64>> = seq.iter().map(|s| lin("m.wv", s, false)).collect();
        let mut want = Vec::new();
        for s in &seq {
            let (mut a, _) = common::attend_loop(&lin("m.wq", s, false), &keys, &vals, heads);
            if merge {
                a = lin("m.merge", &a, true);
            }
            want.push(a.iter().zip(s).map(|(x, y)| x + y).collect::<Vec<f64>>());
        }
        let mut got = rows(g.value(out.cls));
        got.extend(rows(g.value(out.patch)));
        assert!(max_diff(&got, &want) < 1e-12, "case {t}");
    }
}
