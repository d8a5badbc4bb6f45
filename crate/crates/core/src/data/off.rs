use rand::Rng as _;

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// Indexed triangle mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[usize; 3]>,
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    /// Next non-blank line with comments stripped, and its 1-based number.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                return Some((i + 1, line));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let last = self.last;
        self.next_content()
            .ok_or_else(|| Error::parse(last + 1, format!("unexpected end of file, expected {what}")))
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} `{tok}`")))
}

/// Parses an OFF mesh. Polygons with more than three vertices are fan-triangulated.
pub fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (hline, header) = lines.expect("OFF header")?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| Error::parse(hline, "missing OFF header"))?;
    let rest = rest.trim();
    let (cline, counts): (usize, Vec<&str>) = if rest.is_empty() {
        let (l, s) = lines.expect("counts line")?;
        (l, s.split_whitespace().collect())
    } else {
        (hline, rest.split_whitespace().collect())
    };
    if counts.len() < 2 {
        return Err(Error::parse(cline, "counts line needs vertex and face counts"));
    }
    let nv: usize = parse_num(counts[0], cline, "vertex count")?;
    let nf: usize = parse_num(counts[1], cline, "face count")?;

    // Counts come from untrusted input; cap preallocation by the text size.
    let cap = text.len() / 2 + 1;
    let mut vertices = Vec::with_capacity(nv.min(cap));
    for _ in 0..nv {
        let (l, s) = lines.expect("vertex line")?;
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() < 3 {
            return Err(Error::parse(l, format!("vertex needs 3 coordinates, found {}", f.len())));
        }
        let mut p: Point = [0.0; 3];
        for (c, tok) in p.iter_mut().zip(&f) {
            *c = parse_num(tok, l, "coordinate")?;
            if !c.is_finite() {
                return Err(Error::parse(l, format!("non-finite coordinate `{tok}`")));
            }
        }
        vertices.push(p);
    }
    let mut faces = Vec::with_capacity(nf.min(cap));
    for _ in 0..nf {
        let (l, s) = lines.expect("face line")?;
        let f: Vec<&str> = s.split_whitespace().collect();
        let m: usize = parse_num(f[0], l, "face vertex count")?;
        if m < 3 {
            return Err(Error::parse(l, format!("face with {m} vertices is not a polygon")));
        }
        if f.len() - 1 < m {
            return Err(Error::parse(l, format!("face lists {} of {m} indices", f.len() - 1)));
        }
        let idx: Vec<usize> = f[1..=m]
            .iter()
            .map(|t| {
                let i: usize = parse_num(t, l, "vertex index")?;
                if i >= nv {
                    Err(Error::parse(l, format!("vertex index {i} out of range 0..{nv}")))
                } else {
                    Ok(i)
                }
            })
            .collect::<Result<_>>()?;
        for j in 1..m - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(Mesh { vertices, faces })
}

fn triangle_area(a: &Point, b: &Point, c: &Point) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Translates to zero centroid and scales to unit max radius.
pub fn normalize_unit_sphere(points: &mut [Point]) {
    if points.is_empty() {
        return;
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let mut r: f64 = 0.0;
    for p in points.iter_mut() {
        for a in 0..3 {
            p[a] -= c[a];
        }
        r = r.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if r > 0.0 {
        for p in points.iter_mut() {
            for v in p.iter_mut() {
                *v /= r;
            }
        }
    }
}

/// Area-weighted triangle choice, uniform barycentric sampling, unit-sphere normalization.
pub fn sample_mesh_surface(mesh: &Mesh, n: usize, rng: &mut Rng) -> Result<PointCloud> {
    let points = sample_mesh_raw(mesh, n, rng)?;
    let mut points = points.into_iter().map(|(p, _)| p).collect::<Vec<_>>();
    normalize_unit_sphere(&mut points);
    PointCloud::new(points)
}

/// Unnormalized samples paired with the index of the triangle they came from.
pub fn sample_mesh_raw(mesh: &Mesh, n: usize, rng: &mut Rng) -> Result<Vec<(Point, usize)>> {
    if n == 0 {
        return Err(Error::Size("cannot sample zero points".into()));
    }
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        let v = |i: usize| mesh.vertices[i];
        total += triangle_area(&v(f[0]), &v(f[1]), &v(f[2]));
        cum.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateMesh(format!(
            "total surface area {total} over {} faces",
            mesh.faces.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let t = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        let [a, b, c] = mesh.faces[t].map(|i| mesh.vertices[i]);
        let s = rng.gen::<f64>().sqrt();
        let r2 = rng.gen::<f64>();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push((
            [
                wa * a[0] + wb * b[0] + wc * c[0],
                wa * a[1] + wb * b[1] + wc * c[1],
                wa * a[2] + wb * b[2] + wc * c[2],
            ],
            t,
        ));
    }
    Ok(out)
}
