//! Point-set kernels with canonical tie-breaking.
//!
//! Every choice made here depends only on the coordinates of the points, never
//! on their storage order: FPS starts at the lexicographically smallest point
//! and breaks distance ties lexicographically, and k-NN rows are sorted by
//! (squared distance, coordinates). Original indices are the last resort and
//! only matter for exact duplicates, whose coordinates are identical anyway.

mod cloud;

use std::cmp::Ordering;

pub use cloud::{
    canonical_reindex, invert_permutation, lex_cmp, squared_distance, Attrs, Point, PointCloud,
};

use crate::error::{Error, Result};

/// Indices into the parent point set, in FPS visitation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleResult {
    pub indices: Vec<usize>,
}

/// `n × k` neighbour indices, each row sorted canonically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    pub k: usize,
    pub idx: Vec<usize>,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.idx.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

fn point_order(points: &[Point], a: usize, b: usize) -> Ordering {
    lex_cmp(&points[a], &points[b]).then(a.cmp(&b))
}

/// Greedy farthest point sampling of `n` points.
pub fn farthest_point_sample(points: &[Point], n: usize) -> Result<SampleResult> {
    let total = points.len();
    if n == 0 || n > total {
        return Err(Error::Size(format!(
            "cannot sample {n} points from a set of {total}"
        )));
    }
    let seed = (0..total)
        .min_by(|&a, &b| point_order(points, a, b))
        .expect("non-empty");
    let mut selected = vec![false; total];
    let mut min_d = vec![f64::INFINITY; total];
    let mut indices = Vec::with_capacity(n);
    let mut last = seed;
    selected[seed] = true;
    indices.push(seed);
    while indices.len() < n {
        let lp = points[last];
        let mut best: Option<usize> = None;
        for i in 0..total {
            if selected[i] {
                continue;
            }
            let d = squared_distance(&points[i], &lp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let better = match min_d[i].total_cmp(&min_d[b]) {
                        Ordering::Greater => true,
                        Ordering::Less => false,
                        Ordering::Equal => point_order(points, i, b).is_lt(),
                    };
                    Some(if better { i } else { b })
                }
            };
        }
        let b = best.expect("n <= total leaves a candidate");
        selected[b] = true;
        indices.push(b);
        last = b;
    }
    Ok(SampleResult { indices })
}

/// `k` nearest neighbours of each query point among `points`.
pub fn knn_query(points: &[Point], queries: &[Point], k: usize) -> Result<NeighborTable> {
    let total = points.len();
    if k == 0 || k > total {
        return Err(Error::Size(format!(
            "cannot take {k} neighbours from a set of {total}"
        )));
    }
    let mut idx = Vec::with_capacity(queries.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(total);
    for q in queries {
        cand.clear();
        cand.extend(points.iter().enumerate().map(|(i, p)| (squared_distance(p, q), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then_with(|| point_order(points, a.1, b.1))
        };
        if k < total {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        idx.extend(head.iter().map(|c| c.1));
    }
    Ok(NeighborTable { k, idx })
}

/// `k` nearest neighbours of each sampled center within its own parent set.
pub fn knn_search(points: &[Point], centers: &SampleResult, k: usize) -> Result<NeighborTable> {
    let queries: Vec<Point> = centers
        .indices
        .iter()
        .map(|&i| {
            points
                .get(i)
                .copied()
                .ok_or_else(|| Error::Index(format!("center index {i} >= {}", points.len())))
        })
        .collect::<Result<_>>()?;
    knn_query(points, &queries, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_unit_square_picks_diagonal() {
        let pts = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let s = farthest_point_sample(&pts, 2).unwrap();
        assert_eq!(s.indices, vec![2, 1]);
    }

    #[test]
    fn fps_all_points_seed_first() {
        let pts = [[0.5, 0.0, 0.0], [0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.0, 3.0, 1.0]];
        let s = farthest_point_sample(&pts, 4).unwrap();
        assert_eq!(s.indices[0], 1);
        let mut sorted = s.indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_size_errors() {
        let pts = [[0.0; 3]];
        assert!(matches!(farthest_point_sample(&pts, 2), Err(Error::Size(_))));
        assert!(matches!(farthest_point_sample(&pts, 0), Err(Error::Size(_))));
    }

    #[test]
    fn knn_line_example() {
        let pts = [[3.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let t = knn_query(&pts[..], &[[0.0, 0.0, 0.0]], 3).unwrap();
        // center plus x=1, x=2 in that order
        assert_eq!(t.row(0), &[1, 2, 3]);
        let only = [pts[0], pts[2], pts[3]];
        let t = knn_query(&only, &[[0.0, 0.0, 0.0]], 2).unwrap();
        assert_eq!(t.row(0), &[1, 2]);
    }

    #[test]
    fn knn_self_is_nearest() {
        let pts = [[0.3, 0.1, 0.0], [0.0, 0.2, 0.9], [1.0, 1.0, 1.0]];
        let c = SampleResult { indices: vec![2, 0] };
        let t = knn_search(&pts, &c, 1).unwrap();
        assert_eq!(t.idx, vec![2, 0]);
    }

    #[test]
    fn knn_distance_ties_break_lexicographically() {
        // both at distance 1 from the origin
        let pts = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let t = knn_query(&pts, &[[0.0, 0.0, 0.0]], 3).unwrap();
        assert_eq!(t.row(0), &[1, 0, 2]);
    }

    #[test]
    fn knn_size_error() {
        let pts = [[0.0; 3]];
        assert!(matches!(knn_query(&pts, &[[0.0; 3]], 2), Err(Error::Size(_))));
    }
}
