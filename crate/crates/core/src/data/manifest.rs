use std::path::{Path, PathBuf};

use crate::data::{off, resample, stream, xyz, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub split: Option<String>,
}

/// `path,label[,split]` per line; blank and `#` lines are skipped.
/// Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(i + 1, "expected `path,label[,split]`"));
        }
        let p = Path::new(fields[0]);
        out.push(ManifestEntry {
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            label: fields[1].to_string(),
            split: fields.get(2).map(|s| s.to_string()),
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("manifest lists no samples".into()));
    }
    Ok(out)
}

/// Loads every entry, resampling each cloud to `n_points`. Class names are the
/// sorted distinct labels; `.off` files are surface-sampled, anything else is
/// read as XYZ.
pub fn load_manifest(path: &Path, n_points: usize, seed: u64) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base)?;
    let mut class_names: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let mut samples = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let body = std::fs::read_to_string(&e.path)?;
        let label = class_names.binary_search(&e.label).expect("label collected above");
        let mut rng = stream(seed, "manifest", i as u64);
        let is_off = e.path.extension().is_some_and(|x| x.eq_ignore_ascii_case("off"));
        let cloud = if is_off {
            off::sample_mesh_surface(&off::parse_off(&body)?, n_points, &mut rng)?
        } else {
            resample(&xyz::parse_xyz(&body)?, n_points, &mut rng)
        };
        samples.push(cloud.with_label(label));
    }
    Ok(Dataset {
        samples,
        class_names,
        part_names: None,
        split: None,
    })
}

/// The optional split column of every manifest line, in load order.
pub fn manifest_splits(path: &Path) -> Result<Vec<Option<String>>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_manifest(&text, base)?.into_iter().map(|e| e.split).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lines() {
        let m = parse_manifest("a.xyz,chair\n# c\n/x/b.off,table,test\n", Path::new("/d")).unwrap();
        assert_eq!(m[0].path, PathBuf::from("/d/a.xyz"));
        assert_eq!(m[1].split.as_deref(), Some("test"));
        assert!(matches!(
            parse_manifest("a.xyz\n", Path::new(".")),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
