use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{stream, Dataset, Rng};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
        }
    }
}

/// Part ids: cylinder cap 0, side 1; cube faces 2..=7; sphere 8.
pub const N_PARTS: usize = 9;

pub fn part_names() -> Vec<String> {
    let mut v = vec!["cylinder_cap".to_string(), "cylinder_side".to_string()];
    for axis in ["x", "y", "z"] {
        for sign in ["neg", "pos"] {
            v.push(format!("cube_{axis}_{sign}"));
        }
    }
    v.push("sphere".into());
    v
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    None,
    /// About the z axis only.
    Upright,
    /// Uniform over SO(3).
    #[default]
    Full,
}

const CUBE_HALF: f64 = 0.577_350_269_189_625_8; // 1/√3, corners on the unit sphere

/// One surface point and its part id.
pub fn sample_surface(class: ShapeClass, rng: &mut Rng) -> (Point, usize) {
    match class {
        ShapeClass::Sphere => loop {
            let p: Point = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            if r2 > 1e-6 && r2 <= 1.0 {
                let r = r2.sqrt();
                break ([p[0] / r, p[1] / r, p[2] / r], 8);
            }
        },
        ShapeClass::Cube => {
            let face = rng.gen_range(0..6);
            let (axis, sign) = (face / 2, if face % 2 == 0 { -1.0 } else { 1.0 });
            let mut p = [0.0; 3];
            for (a, v) in p.iter_mut().enumerate() {
                *v = if a == axis {
                    sign * CUBE_HALF
                } else {
                    rng.gen_range(-CUBE_HALF..CUBE_HALF)
                };
            }
            (p, 2 + face)
        }
        ShapeClass::Cylinder => {
            // radius = half-height = 1/√2; caps hold 1/3 of the area
            let r = FRAC_1_SQRT_2;
            let theta = rng.gen_range(0.0..2.0 * PI);
            if rng.gen_range(0.0..3.0) < 1.0 {
                let rho = r * rng.gen::<f64>().sqrt();
                let z = if rng.gen::<bool>() { r } else { -r };
                ([rho * theta.cos(), rho * theta.sin(), z], 0)
            } else {
                let z = rng.gen_range(-r..r);
                ([r * theta.cos(), r * theta.sin(), z], 1)
            }
        }
    }
}

fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn random_rotation(mode: Rotation, rng: &mut Rng) -> [[f64; 3]; 3] {
    match mode {
        Rotation::None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        Rotation::Upright => {
            let t = rng.gen_range(0.0..2.0 * PI);
            let (s, c) = t.sin_cos();
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
        }
        Rotation::Full => {
            // Shoemake's uniform quaternion
            let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
            let (t2, t3) = (2.0 * PI * u2, 2.0 * PI * u3);
            quat_matrix([b * t3.cos(), a * t2.sin(), a * t2.cos(), b * t3.sin()])
        }
    }
}

fn rotate(m: &[[f64; 3]; 3], p: &Point) -> Point {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// One labelled, part-annotated sample.
pub fn synth_sample(
    class: ShapeClass,
    label: usize,
    n_points: usize,
    rotation: Rotation,
    rng: &mut Rng,
) -> Result<PointCloud> {
    let rot = random_rotation(rotation, rng);
    let (pts, parts): (Vec<Point>, Vec<usize>) = (0..n_points)
        .map(|_| {
            let (p, part) = sample_surface(class, rng);
            (rotate(&rot, &p), part)
        })
        .unzip();
    PointCloud::new(pts)?.with_label(label).with_seg_labels(parts)
}

/// `per_class` samples of each class, class-major; sample `i` draws from stream `i`.
pub fn synth_shapes(
    classes: &[ShapeClass],
    per_class: usize,
    n_points: usize,
    rotation: Rotation,
    seed: u64,
) -> Result<Dataset> {
    if n_points < 8 {
        return Err(Error::Size(format!("synthetic samples need at least 8 points, got {n_points}")));
    }
    let mut samples = Vec::with_capacity(classes.len() * per_class);
    for (label, &class) in classes.iter().enumerate() {
        for j in 0..per_class {
            let idx = (label * per_class + j) as u64;
            let mut rng = stream(seed, "synth", idx);
            samples.push(synth_sample(class, label, n_points, rotation, &mut rng)?);
        }
    }
    Ok(Dataset {
        samples,
        class_names: classes.iter().map(|c| c.name().to_string()).collect(),
        part_names: Some(part_names()),
        split: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_on_unit_sphere_and_sizes() {
        let d = synth_shapes(&ShapeClass::ALL, 4, 64, Rotation::Full, 1).unwrap();
        assert_eq!(d.samples.len(), 12);
        for p in &d.samples[0].coords {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-9);
        }
        assert_eq!(d.samples[5].label, Some(1));
    }

    #[test]
    fn deterministic() {
        let a = synth_shapes(&ShapeClass::ALL, 3, 32, Rotation::Full, 9).unwrap();
        let b = synth_shapes(&ShapeClass::ALL, 3, 32, Rotation::Full, 9).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = stream(0, "rot", 0);
        for _ in 0..20 {
            let m = random_rotation(Rotation::Full, &mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cube_parts_lie_on_their_faces() {
        let mut rng = stream(0, "cube", 0);
        for _ in 0..100 {
            let (p, part) = sample_surface(ShapeClass::Cube, &mut rng);
            let face = part - 2;
            let want = if face % 2 == 0 { -CUBE_HALF } else { CUBE_HALF };
            assert_eq!(p[face / 2], want);
        }
        assert_eq!(part_names().len(), N_PARTS);
    }
}
