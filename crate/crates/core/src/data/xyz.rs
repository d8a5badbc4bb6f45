use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// Whitespace-separated rows; `#` starts a comment line. Columns past the
/// third become per-point attributes and must have the same count on every row.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut coords: Vec<Point> = Vec::new();
    let mut attrs: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(Error::parse(line_no, format!("non-finite value `{f}`"))),
                Err(_) => Err(Error::parse(line_no, format!("not a number: `{f}`"))),
            })
            .collect::<Result<_>>()?;
        if fields.len() < 3 {
            return Err(Error::parse(
                line_no,
                format!("expected at least 3 columns, found {}", fields.len()),
            ));
        }
        let extra = fields.len() - 3;
        match width {
            None => width = Some(extra),
            Some(w) if w != extra => {
                return Err(Error::parse(
                    line_no,
                    format!("expected {} columns, found {}", w + 3, fields.len()),
                ))
            }
            _ => {}
        }
        coords.push([fields[0], fields[1], fields[2]]);
        attrs.extend_from_slice(&fields[3..]);
    }
    if coords.is_empty() {
        return Err(Error::Empty("xyz input has no points".into()));
    }
    let cloud = PointCloud::new(coords)?;
    match width {
        Some(w) if w > 0 => cloud.with_attrs(w, attrs),
        _ => Ok(cloud),
    }
}

/// Inverse of [`parse_xyz`]; values are written in shortest round-trip form.
pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.coords.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(a) = &cloud.attrs {
            for v in &a.values[i * a.dim..(i + 1) * a.dim] {
                let _ = write!(out, " {v}");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_and_errors() {
        assert_eq!(parse_xyz("0 0 0\n1 2 3").unwrap().len(), 2);
        assert!(matches!(parse_xyz("a b c"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("# only\n\n"), Err(Error::Empty(_))));
        assert!(matches!(parse_xyz("0 0 0\n1 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_xyz("0 0 nan"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn attributes_kept() {
        let c = parse_xyz("0 0 0 5 6\n1 1 1 7 8\n").unwrap();
        let a = c.attrs.unwrap();
        assert_eq!((a.dim, a.values), (2, vec![5.0, 6.0, 7.0, 8.0]));
        assert!(parse_xyz("0 0 0 5\n1 1 1\n").is_err());
    }
}
