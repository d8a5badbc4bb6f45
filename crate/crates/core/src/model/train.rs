use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, stream, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::metrics::{classification_metrics, segmentation_metrics, ClassMetrics, SegMetrics};
use crate::model::{argmax, Model, Task};
use crate::numerics::{Adam, Gradients, Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Anneal the learning rate along a half cosine from `lr` to `lr * min_lr_ratio`.
    pub cosine: bool,
    pub min_lr_ratio: f64,
    /// Stop once the evaluated headline metric reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 1e-3,
            batch: 16,
            seed: 0,
            augment: true,
            augmentation: AugmentConfig::default(),
            cosine: true,
            min_lr_ratio: 0.01,
            stop_at: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Classify(ClassMetrics),
    Segment(SegMetrics),
}

impl EvalReport {
    /// OA for classification, instance mIoU for segmentation.
    pub fn headline(&self) -> f64 {
        match self {
            EvalReport::Classify(m) => m.oa,
            EvalReport::Segment(m) => m.inst_miou,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

fn label_of(cloud: &PointCloud, i: usize) -> Result<usize> {
    cloud
        .label
        .ok_or_else(|| Error::Contract(format!("sample {i} has no label")))
}

fn onehot(n: usize, c: usize) -> Result<Vec<f64>> {
    if c >= n {
        return Err(Error::Index(format!("category {c} >= {n}")));
    }
    let mut v = vec![0.0; n];
    v[c] = 1.0;
    Ok(v)
}

/// Training loss of one sample as a graph node.
pub fn sample_loss(
    model: &Model,
    store: &ParamStore,
    g: &mut Graph,
    cloud: &PointCloud,
    index: usize,
) -> Result<Var> {
    let (net, cfg) = (&model.net, &model.cfg);
    let label = label_of(cloud, index)?;
    match cfg.task {
        Task::Classify => {
            let out = net.classify(store, g, cloud, cfg.n_input)?;
            let mut loss = g.cross_entropy(out.logits, &[label])?;
            if cfg.aux_branch_loss {
                if let Some((hl, hs)) = out.branches {
                    let ll = g.cross_entropy(hl, &[label])?;
                    let ls = g.cross_entropy(hs, &[label])?;
                    loss = g.add(loss, ll)?;
                    loss = g.add(loss, ls)?;
                }
            }
            Ok(loss)
        }
        Task::Segment => {
            let seg = cloud
                .seg_labels
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("sample {index} has no part labels")))?;
            let logits = net.segment(store, g, cloud, &onehot(cfg.n_categories, label)?, cfg.n_input)?;
            g.cross_entropy(logits, seg)
        }
    }
}

fn sample_gradients(model: &Model, cloud: &PointCloud, index: usize) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let loss = sample_loss(model, &model.store, &mut g, cloud, index)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        let culprit = match g.first_nonfinite() {
            Some((node, op)) => format!("first non-finite tensor is node {node} ({op})"),
            None => "no intermediate tensor is non-finite".into(),
        };
        return Err(Error::Numeric(format!(
            "loss {value} on sample {index}; {culprit}"
        )));
    }
    Ok((value, g.gradients(loss, model.store.len())?))
}

/// Learning rate used throughout `epoch` (0-based).
pub fn epoch_lr(tc: &TrainConfig, epoch: usize) -> f64 {
    if !tc.cosine || tc.epochs <= 1 {
        return tc.lr;
    }
    let t = epoch as f64 / (tc.epochs - 1) as f64;
    let lo = tc.lr * tc.min_lr_ratio;
    lo + 0.5 * (tc.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Minibatch Adam on `train`; evaluates on `test` (or on `train` without
/// augmentation) after every epoch and calls `on_epoch` with the record.
pub fn train(
    model: &mut Model,
    train: &Dataset,
    test: Option<&Dataset>,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    if train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if tc.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut opt = Adam::new(tc.lr);
    let mut history = History::default();
    let n = train.len();
    for epoch in 0..tc.epochs {
        opt.lr = epoch_lr(tc, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream(tc.seed, "shuffle", epoch as u64));
        }
        let mut total = 0.0;
        for batch in order.chunks(tc.batch) {
            let inputs: Vec<(usize, PointCloud)> = batch
                .iter()
                .map(|&i| {
                    let c = &train.samples[i];
                    let c = if tc.augment {
                        let mut r = stream(tc.seed, "augment", ((epoch as u64) << 32) | i as u64);
                        augment(c, &tc.augmentation, &mut r)
                    } else {
                        c.clone()
                    };
                    (i, c)
                })
                .collect();
            let m: &Model = model;
            let results: Vec<Result<(f64, Gradients)>> = inputs
                .par_iter()
                .map(|(i, c)| sample_gradients(m, c, *i))
                .collect();
            model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, grads) = r?;
                total += loss;
                model.store.accumulate(&grads, scale);
            }
            opt.step(&mut model.store);
        }
        let eval = evaluate(model, test.unwrap_or(train))?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: total / n as f64,
            eval,
        };
        on_epoch(&rec);
        let done = tc.stop_at.is_some_and(|t| rec.eval.headline() >= t);
        history.epochs.push(rec);
        if done {
            break;
        }
    }
    Ok(history)
}

/// Predicted class (or per-point parts) for every sample, without augmentation.
pub fn predict(model: &Model, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    ds.samples
        .par_iter()
        .enumerate()
        .map(|(i, c)| match model.cfg.task {
            Task::Classify => Ok(vec![argmax(&model.logits(c)?)]),
            Task::Segment => {
                let logits = model.part_logits(c, label_of(c, i)?)?;
                let p = model.cfg.n_parts;
                Ok(logits.chunks_exact(p).map(argmax).collect())
            }
        })
        .collect()
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalReport> {
    let preds = predict(model, ds)?;
    let labels = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, c)| label_of(c, i))
        .collect::<Result<Vec<_>>>()?;
    match model.cfg.task {
        Task::Classify => {
            let p: Vec<usize> = preds.iter().map(|v| v[0]).collect();
            let classes = model.cfg.num_classes;
            Ok(EvalReport::Classify(classification_metrics(&p, &labels, classes)?))
        }
        Task::Segment => {
            let gts = ds
                .samples
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    c.seg_labels
                        .clone()
                        .ok_or_else(|| Error::Contract(format!("sample {i} has no part labels")))
                })
                .collect::<Result<Vec<_>>>()?;
            // valid parts of a category: every part seen in its ground truth
            let mut parts_of = vec![Vec::new(); model.cfg.n_categories];
            for (g, &c) in gts.iter().zip(&labels) {
                let set: &mut Vec<usize> = parts_of
                    .get_mut(c)
                    .ok_or_else(|| Error::Index(format!("category {c} out of range")))?;
                set.extend_from_slice(g);
                set.sort_unstable();
                set.dedup();
            }
            Ok(EvalReport::Segment(segmentation_metrics(&preds, &gts, &labels, &parts_of)?))
        }
    }
}
