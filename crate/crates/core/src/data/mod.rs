//! Point-cloud ingestion, synthetic shapes, augmentation and splits.

pub mod augment;
pub mod manifest;
pub mod off;
mod rng;
pub mod split;
pub mod synth;
pub mod xyz;

use rand::seq::SliceRandom;
use rand::Rng as _;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use off::{parse_off, sample_mesh_surface, Mesh};
pub use rng::{stream, Rng};
pub use split::split;
pub use synth::{synth_shapes, Rotation, ShapeClass};
pub use xyz::{parse_xyz, write_xyz};

use crate::geometry::PointCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub part_names: Option<Vec<String>>,
    pub split: Option<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn subset(&self, idx: &[usize], tag: &str) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            part_names: self.part_names.clone(),
            split: Some(tag.to_string()),
        }
    }
}

/// Random subset of `n` points, or all points padded with random repeats.
pub fn resample(cloud: &PointCloud, n: usize, rng: &mut Rng) -> PointCloud {
    let total = cloud.len();
    let mut idx: Vec<usize> = (0..total).collect();
    if total >= n {
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
    } else {
        while idx.len() < n {
            idx.push(rng.gen_range(0..total));
        }
    }
    cloud.permuted(&idx)
}
