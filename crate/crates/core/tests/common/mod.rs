//! Straight-line reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod census;

use std::cmp::Ordering;

use pointcat::data::{stream, Rng};
use pointcat::geometry::Point;
use pointcat::numerics::ParamStore;
use rand::Rng as _;

pub fn rng(tag: &str, i: u64) -> Rng {
    stream(7, tag, i)
}

pub fn random_points(r: &mut Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
        .collect()
}

/// Points on a coarse integer grid, so distance ties are common.
pub fn grid_points(r: &mut Rng, n: usize, side: i32) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                r.gen_range(0..side) as f64,
                r.gen_range(0..side) as f64,
                r.gen_range(0..side) as f64,
            ]
        })
        .collect()
}

pub fn random_perm(r: &mut Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn coord_order(pts: &[Point], a: usize, b: usize) -> Ordering {
    for c in 0..3 {
        match pts[a][c].total_cmp(&pts[b][c]) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.cmp(&b)
}

/// FPS recomputing every distance from scratch at each step.
pub fn brute_fps(pts: &[Point], n: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..pts.len()).collect();
    all.sort_by(|&a, &b| coord_order(pts, a, b));
    let mut chosen = vec![all[0]];
    while chosen.len() < n {
        let mut best: Option<(f64, usize)> = None;
        for &i in &all {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen.iter().map(|&c| d2(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
            // `all` is in canonical order, so the first maximum wins ties
            if best.map_or(true, |(bm, _)| m > bm) {
                best = Some((m, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Full sort of every candidate by (distance, coordinates, index).
pub fn brute_knn(pts: &[Point], queries: &[Point], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for q in queries {
        let mut all: Vec<usize> = (0..pts.len()).collect();
        all.sort_by(|&a, &b| {
            d2(&pts[a], q)
                .total_cmp(&d2(&pts[b], q))
                .then_with(|| coord_order(pts, a, b))
        });
        out.extend_from_slice(&all[..k]);
    }
    out
}

pub fn value(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store.lookup(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).data().to_vec()
}

/// `x · W + b` for one row, `W` stored `[cin, cout]` row-major.
pub fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; cout];
    for o in 0..cout {
        let mut s = 0.0;
        for i in 0..x.len() {
            s += x[i] * w[i * cout + o];
        }
        y[o] = s + b.map_or(0.0, |b| b[o]);
    }
    y
}

pub fn linear_named(store: &ParamStore, name: &str, x: &[f64], cout: usize, bias: bool) -> Vec<f64> {
    let w = value(store, &format!("{name}.w"));
    let b = bias.then(|| value(store, &format!("{name}.b")));
    affine(x, &w, b.as_deref(), cout)
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    (0..x.len()).map(|i| (x[i] - mu) * inv * gamma[i] + beta[i]).collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Multi-head attention of one query over `keys` with explicit loops.
/// Returns the output row and the per-head weights.
pub fn attend_loop(
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = q.len();
    let dk = d / heads;
    let mut out = vec![0.0; d];
    let mut all_w = Vec::new();
    for h in 0..heads {
        let lo = h * dk;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| (lo..lo + dk).map(|c| q[c] * k[c]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / z).collect();
        for (j, v) in values.iter().enumerate() {
            for c in lo..lo + dk {
                out[c] += w[j] * v[c];
            }
        }
        all_w.push(w);
    }
    (out, all_w)
}

/// One cross-attention step of the class token `cls` (width `cs`) against the
/// other branch's `patches` (width `co`), reading weights under `name`.
pub fn cross_attention_loop(
    store: &ParamStore,
    name: &str,
    cls: &[f64],
    patches: &[Vec<f64>],
    heads: usize,
    merge: bool,
) -> Vec<f64> {
    let cs = cls.len();
    let co = patches[0].len();
    let q_tok = linear_named(store, &format!("{name}.proj_in"), cls, co, true);
    let q_tok = layer_norm(
        &q_tok,
        &value(store, &format!("{name}.ln_in.gamma")),
        &value(store, &format!("{name}.ln_in.beta")),
    );
    let mut seq = vec![q_tok.clone()];
    seq.extend(patches.iter().cloned());
    let q = linear_named(store, &format!("{name}.attn.wq"), &q_tok, co, false);
    let keys: Vec<Vec<f64>> = seq
        .iter()
        .map(|s| linear_named(store, &format!("{name}.attn.wk"), s, co, false))
        .collect();
    let vals: Vec<Vec<f64>> = seq
        .iter()
        .map(|s| linear_named(store, &format!("{name}.attn.wv"), s, co, false))
        .collect();
    let (mut a, _) = attend_loop(&q, &keys, &vals, heads);
    if merge {
        a = linear_named(store, &format!("{name}.attn.merge"), &a, co, true);
    }
    let res: Vec<f64> = a.iter().zip(&q_tok).map(|(x, y)| x + y).collect();
    let out = linear_named(store, &format!("{name}.proj_out"), &res, cs, true);
    layer_norm(
        &out,
        &value(store, &format!("{name}.ln_out.gamma")),
        &value(store, &format!("{name}.ln_out.beta")),
    )
}

/// Residual MLP then max over the `k` rows of every group.
pub fn phi_max_loop(store: &ParamStore, name: &str, rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let d2x = 2 * rows[0].len();
    let per_row: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| {
            let h = linear_named(store, &format!("{name}.lift"), x, d2x, true);
            let r = relu(linear_named(store, &format!("{name}.fc1"), &h, d2x, true));
            let r = linear_named(store, &format!("{name}.fc2"), &r, d2x, true);
            relu(h.iter().zip(&r).map(|(a, b)| a + b).collect())
        })
        .collect();
    per_row
        .chunks(k)
        .map(|g| {
            (0..d2x)
                .map(|c| g.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect()
}

pub fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt()
}
