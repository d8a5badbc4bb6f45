use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub oa: f64,
    pub macc: f64,
    /// `None` for classes absent from the labels.
    pub per_class: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

pub fn classification_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ClassMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::Size(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let mut total = vec![0usize; num_classes];
    let mut hit = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= num_classes {
            return Err(Error::Index(format!("label {l} >= {num_classes}")));
        }
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    let mut warnings = Vec::new();
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            if total[c] == 0 {
                warnings.push(format!("class {c} has no samples; excluded from mAcc"));
                None
            } else {
                Some(hit[c] as f64 / total[c] as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassMetrics {
        oa: correct as f64 / labels.len() as f64,
        macc: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// Mean over shapes of the per-shape mean part IoU.
    pub inst_miou: f64,
    /// Mean over categories of their mean shape IoU.
    pub cls_miou: f64,
    pub per_category: Vec<Option<f64>>,
    /// IoU of every part id pooled over all shapes.
    pub per_part: Vec<Option<f64>>,
}

/// `parts_of[c]` lists the part ids valid for category `c`. A part absent
/// from both prediction and ground truth of a shape scores IoU 1.
pub fn segmentation_metrics(
    preds: &[Vec<usize>],
    gts: &[Vec<usize>],
    categories: &[usize],
    parts_of: &[Vec<usize>],
) -> Result<SegMetrics> {
    if preds.len() != gts.len() || gts.len() != categories.len() {
        return Err(Error::Size("predictions, labels and categories differ in length".into()));
    }
    if gts.is_empty() {
        return Err(Error::Empty("no shapes to evaluate".into()));
    }
    let n_parts = parts_of.iter().flatten().map(|&p| p + 1).max().unwrap_or(0);
    let mut pooled = vec![(0usize, 0usize); n_parts];
    let mut cat_sum = vec![(0.0, 0usize); parts_of.len()];
    let mut inst = 0.0;
    for ((p, g), &c) in preds.iter().zip(gts).zip(categories) {
        if p.len() != g.len() {
            return Err(Error::Size(format!("{} predictions for {} points", p.len(), g.len())));
        }
        let parts = parts_of
            .get(c)
            .ok_or_else(|| Error::Index(format!("category {c} >= {}", parts_of.len())))?;
        let mut shape = 0.0;
        for &part in parts {
            let (mut tp, mut union) = (0, 0);
            for (&a, &b) in p.iter().zip(g) {
                let (pa, gb) = (a == part, b == part);
                tp += usize::from(pa && gb);
                union += usize::from(pa || gb);
            }
            pooled[part].0 += tp;
            pooled[part].1 += union;
            shape += if union == 0 { 1.0 } else { tp as f64 / union as f64 };
        }
        let shape = if parts.is_empty() { 1.0 } else { shape / parts.len() as f64 };
        inst += shape;
        cat_sum[c].0 += shape;
        cat_sum[c].1 += 1;
    }
    let per_category: Vec<Option<f64>> = cat_sum
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    let present: Vec<f64> = per_category.iter().flatten().copied().collect();
    Ok(SegMetrics {
        inst_miou: inst / gts.len() as f64,
        cls_miou: present.iter().sum::<f64>() / present.len() as f64,
        per_category,
        per_part: pooled
            .iter()
            .map(|&(tp, u)| (u > 0).then(|| tp as f64 / u as f64))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant() {
        let l = [0, 1, 2, 0, 1, 2];
        let m = classification_metrics(&l, &l, 3).unwrap();
        assert_eq!((m.oa, m.macc), (1.0, 1.0));
        let m = classification_metrics(&[0; 6], &l, 3).unwrap();
        assert!((m.oa - 1.0 / 3.0).abs() < 1e-15 && (m.macc - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn missing_class_is_excluded() {
        let m = classification_metrics(&[0, 1], &[0, 0], 3).unwrap();
        assert_eq!(m.per_class, vec![Some(0.5), None, None]);
        assert_eq!(m.macc, 0.5);
        assert_eq!(m.warnings.len(), 2);
    }

    #[test]
    fn perfect_segmentation() {
        let g = vec![vec![0, 1, 1], vec![2, 2, 3]];
        let m = segmentation_metrics(&g, &g, &[0, 1], &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!((m.inst_miou, m.cls_miou), (1.0, 1.0));
    }
}
