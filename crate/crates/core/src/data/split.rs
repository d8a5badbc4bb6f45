use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::{Dataset, Rng};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Allocates `total` across classes in proportion to `sizes` by largest remainder.
fn allocate(sizes: &[usize], frac: f64) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let target = (frac * n as f64).round() as usize;
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| (frac * s as f64).floor() as usize).collect();
    let mut rem: Vec<(f64, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| (frac * s as f64 - alloc[i] as f64, i))
        .collect();
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut have: usize = alloc.iter().sum();
    for &(_, i) in rem.iter().cycle().take(sizes.len() * 2) {
        if have >= target {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            have += 1;
        }
    }
    alloc
}

/// Stratified train/test split. `fractions` are `(train, test)` and must sum to 1.
/// Falls back to an unstratified split if any class has fewer than two samples.
pub fn split(ds: &Dataset, fractions: [f64; 2], rng: &mut Rng) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions[0] + fractions[1] - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let label = s
            .label
            .ok_or_else(|| Error::Contract(format!("sample {i} has no label")))?;
        by_class.entry(label).or_default().push(i);
    }
    let mut warnings = Vec::new();
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    if let Some((c, _)) = by_class.iter().find(|(_, v)| v.len() < 2) {
        warnings.push(format!(
            "class {c} has fewer than 2 samples; using an unstratified split"
        ));
        let mut all: Vec<usize> = (0..ds.samples.len()).collect();
        all.shuffle(rng);
        let k = allocate(&[all.len()], fractions[0])[0];
        train_idx.extend_from_slice(&all[..k]);
        test_idx.extend_from_slice(&all[k..]);
    } else {
        let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
        let alloc = allocate(&sizes, fractions[0]);
        for (members, k) in by_class.values().zip(alloc) {
            let mut m = members.clone();
            m.shuffle(rng);
            train_idx.extend_from_slice(&m[..k]);
            test_idx.extend_from_slice(&m[k..]);
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(Split {
        train: ds.subset(&train_idx, "train"),
        test: ds.subset(&test_idx, "test"),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_hits_total() {
        assert_eq!(allocate(&[100, 100, 100], 2.0 / 3.0), vec![67, 67, 66]);
        assert_eq!(allocate(&[30, 30, 30], 2.0 / 3.0), vec![20, 20, 20]);
    }
}
