use std::cmp::Ordering;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// An `N × 3` point set with optional per-point attributes and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point>,
    /// Row-major `N × attr_dim` extra columns.
    pub attrs: Option<Attrs>,
    pub label: Option<usize>,
    pub seg_labels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attrs {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Empty("point cloud has no points".into()));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            coords,
            attrs: None,
            label: None,
            seg_labels: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_seg_labels(mut self, seg: Vec<usize>) -> Result<Self> {
        if seg.len() != self.coords.len() {
            return Err(Error::Size(format!(
                "{} segment labels for {} points",
                seg.len(),
                self.coords.len()
            )));
        }
        self.seg_labels = Some(seg);
        Ok(self)
    }

    pub fn with_attrs(mut self, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * self.coords.len() {
            return Err(Error::Size(format!(
                "{} attribute values for {} points of width {dim}",
                values.len(),
                self.coords.len()
            )));
        }
        self.attrs = Some(Attrs { dim, values });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            attrs: self.attrs.as_ref().map(|a| Attrs {
                dim: a.dim,
                values: perm
                    .iter()
                    .flat_map(|&i| a.values[i * a.dim..(i + 1) * a.dim].iter().copied())
                    .collect(),
            }),
            label: self.label,
            seg_labels: self
                .seg_labels
                .as_ref()
                .map(|s| perm.iter().map(|&i| s[i]).collect()),
        }
    }

    /// Fails with the first pair of identical points.
    pub fn check_distinct(&self) -> Result<()> {
        canonical_reindex(self, true).map(|_| ())
    }
}

/// Lexicographic order on (x, y, z).
pub fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Permutation sorting the points lexicographically; `perm[i]` is the original
/// index of the `i`-th smallest point. Identical points keep their input order
/// unless `strict`, in which case they are rejected.
pub fn canonical_reindex(cloud: &PointCloud, strict: bool) -> Result<Vec<usize>> {
    let mut perm: Vec<usize> = (0..cloud.len()).collect();
    perm.sort_by(|&a, &b| lex_cmp(&cloud.coords[a], &cloud.coords[b]).then(a.cmp(&b)));
    if strict {
        for w in perm.windows(2) {
            if lex_cmp(&cloud.coords[w[0]], &cloud.coords[w[1]]).is_eq() {
                return Err(Error::Duplicate {
                    first: w[0].min(w[1]),
                    second: w[0].max(w[1]),
                });
            }
        }
    }
    Ok(perm)
}

/// Inverse of a permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
