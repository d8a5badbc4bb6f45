use crate::error::{Error, Result};
use crate::geometry::{knn_query, Point};
use crate::numerics::layers::Linear;
use crate::numerics::{Graph, ParamStore, Var};

pub const PROP_FAN: usize = 3;
pub const PROP_EPS: f64 = 1e-8;

/// Neighbour indices and normalized inverse-squared-distance weights of each
/// fine point over its nearest coarse points. Returns `(idx, weights, fan)`.
pub fn interpolation_weights(coarse: &[Point], fine: &[Point]) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if coarse.is_empty() {
        return Err(Error::Empty("feature propagation needs coarse points".into()));
    }
    let fan = PROP_FAN.min(coarse.len());
    let table = knn_query(coarse, fine, fan)?;
    let mut weights = Vec::with_capacity(table.idx.len());
    for (i, q) in fine.iter().enumerate() {
        let row = table.row(i);
        let w: Vec<f64> = row
            .iter()
            .map(|&j| 1.0 / (crate::geometry::squared_distance(&coarse[j], q) + PROP_EPS))
            .collect();
        let s: f64 = w.iter().sum();
        weights.extend(w.iter().map(|v| v / s));
    }
    Ok((table.idx, weights, fan))
}

/// Interpolates `coarse_feats` onto `fine_pts` without the skip/linear unit.
pub fn interpolate(
    g: &mut Graph,
    coarse_pts: &[Point],
    coarse_feats: Var,
    fine_pts: &[Point],
) -> Result<Var> {
    let (idx, w, fan) = interpolation_weights(coarse_pts, fine_pts)?;
    g.weighted_rows(coarse_feats, idx, w, fan)
}

/// Interpolation, concatenation with the fine skip features, then `relu(linear(·))`.
pub fn feature_propagate(
    g: &mut Graph,
    store: &ParamStore,
    coarse_pts: &[Point],
    coarse_feats: Var,
    fine_pts: &[Point],
    fine_feats: Var,
    unit: &Linear,
) -> Result<Var> {
    let interp = interpolate(g, coarse_pts, coarse_feats, fine_pts)?;
    let cat = g.concat_cols(&[interp, fine_feats])?;
    let h = unit.forward(g, store, cat)?;
    Ok(g.relu(h))
}
