use pointcat::data::manifest::load_manifest;
use pointcat::data::{parse_off, parse_xyz, stream, synth_shapes, Rotation, ShapeClass};
use pointcat::data::off::sample_mesh_raw;
use pointcat::error::Error;

const TETRA: &str = "OFF\n# tetrahedron\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";

fn line_of(e: Error) -> usize {
    match e {
        Error::Parse { line, .. } => line,
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn off_errors_carry_line_numbers() {
    assert_eq!(line_of(parse_off("OF\n").unwrap_err()), 1);
    assert_eq!(line_of(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n").unwrap_err()), 5);
    assert_eq!(line_of(parse_off("OFF\n3 1 0\n0 0 0\n1 x 0\n0 1 0\n3 0 1 2\n").unwrap_err()), 4);
    assert_eq!(line_of(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n").unwrap_err()), 6);
}

#[test]
fn quads_are_fan_triangulated() {
    let m = parse_off("OFF 4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
    assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
}

#[test]
fn mesh_samples_lie_on_their_triangles() {
    let m = parse_off(TETRA).unwrap();
    let mut r = stream(5, "mesh", 0);
    let samples = sample_mesh_raw(&m, 4000, &mut r).unwrap();
    let mut counts = [0usize; 4];
    for (p, t) in &samples {
        counts[*t] += 1;
        let ok = match t {
            0 => p[2].abs() < 1e-12,
            1 => p[1].abs() < 1e-12,
            2 => p[0].abs() < 1e-12,
            _ => (p[0] + p[1] + p[2] - 1.0).abs() < 1e-12,
        };
        assert!(ok && p.iter().all(|&v| v >= -1e-12), "{p:?} not on face {t}");
    }
    // the slanted face has sqrt(3) times the area of each axis face
    let frac = counts[3] as f64 / 4000.0;
    let want = 3f64.sqrt() / (3.0 + 3f64.sqrt());
    assert!((frac - want).abs() < 0.03, "{frac} vs {want}");
}

#[test]
fn degenerate_meshes_are_rejected() {
    let flat = parse_off("OFF\n3 1 0\n0 0 0\n1 1 1\n2 2 2\n3 0 1 2\n").unwrap();
    let mut r = stream(0, "mesh", 0);
    assert!(matches!(sample_mesh_raw(&flat, 10, &mut r), Err(Error::DegenerateMesh(_))));
}

#[test]
fn xyz_rejects_short_rows_and_non_finite_values() {
    assert_eq!(line_of(parse_xyz("0 0 0\n1 2\n").unwrap_err()), 2);
    assert!(parse_xyz("0 0 0\nnan 0 0\n").is_err());
    assert!(parse_xyz("").is_err());
}

#[test]
fn synthetic_shapes_are_deterministic_and_labelled() {
    let a = synth_shapes(&ShapeClass::ALL, 5, 64, Rotation::Full, 11).unwrap();
    let b = synth_shapes(&ShapeClass::ALL, 5, 64, Rotation::Full, 11).unwrap();
    let c = synth_shapes(&ShapeClass::ALL, 5, 64, Rotation::Full, 12).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_ne!(a.samples, c.samples);
    let labels: Vec<usize> = a.samples.iter().map(|s| s.label.unwrap()).collect();
    assert_eq!(labels, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
    assert!(a.samples.iter().all(|s| s.len() == 64));
}

#[test]
fn manifest_mixes_off_and_xyz() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("t.off"), TETRA).unwrap();
    let pts: String = (0..20).map(|i| format!("{} {} {}\n", i, i * i, 3 * i)).collect();
    std::fs::write(d.path().join("c.xyz"), pts).unwrap();
    std::fs::write(d.path().join("list.csv"), "# comment\nt.off,zeta\n\nc.xyz,alpha\n").unwrap();
    let ds = load_manifest(&d.path().join("list.csv"), 32, 3).unwrap();
    assert_eq!(ds.class_names, ["alpha", "zeta"]);
    assert_eq!(ds.samples[0].label, Some(1));
    assert!(ds.samples.iter().all(|s| s.len() == 32));
    let again = load_manifest(&d.path().join("list.csv"), 32, 3).unwrap();
    assert_eq!(ds.samples, again.samples);
    std::fs::write(d.path().join("bad.csv"), "t.off\n").unwrap();
    assert!(load_manifest(&d.path().join("bad.csv"), 32, 3).is_err());
}
