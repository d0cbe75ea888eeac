//! ASCII PLY with `x y z red green blue` and an optional integer `label`.

use std::fmt::Write as _;
use std::path::Path;

use super::{LabeledCloud, Result, SceneError};

/// Label value written for points without ground truth.
pub const UNLABELED: u32 = 255;

fn perr(line: usize, detail: impl Into<String>) -> SceneError {
    SceneError::Parse { line, detail: detail.into() }
}

pub fn write_ply(cloud: &LabeledCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 40 + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    if !cloud.name.is_empty() && !cloud.name.contains('\n') {
        let _ = writeln!(s, "comment name {}", cloud.name);
    }
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    s.push_str("property int label\nend_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.color(i).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        let l = cloud.labels.as_ref().map_or(UNLABELED, |l| l[i]);
        let _ = writeln!(s, "{} {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2], l);
    }
    s
}

pub fn save_ply(cloud: &LabeledCloud, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_ply(cloud))?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Float,
    Int,
    UChar,
}

pub fn parse_ply(text: &str, default_name: &str) -> Result<LabeledCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(perr(1, "missing 'ply' magic")),
    }
    let mut name = default_name.to_string();
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, Kind)> = Vec::new();
    let mut in_vertex = false;
    let mut last_line = 1;
    loop {
        let Some((ln, line)) = lines.next() else {
            return Err(perr(last_line, "header not terminated by end_header"));
        };
        last_line = ln;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(perr(ln, "only ascii PLY is supported")),
            ["comment", "name", rest @ ..] => name = rest.join(" "),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| perr(ln, format!("bad vertex count '{n}'")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => return Err(perr(ln, "list properties on vertices unsupported")),
            ["property", ty, pname] if in_vertex => {
                let kind = match *ty {
                    "float" | "float32" | "double" | "float64" => Kind::Float,
                    "uchar" | "uint8" => Kind::UChar,
                    "char" | "int8" | "short" | "ushort" | "int" | "uint" | "int16" | "uint16" | "int32" | "uint32" => {
                        Kind::Int
                    }
                    other => return Err(perr(ln, format!("unknown property type '{other}'"))),
                };
                props.push((pname.to_string(), kind));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(perr(ln, format!("unexpected header line '{line}'"))),
        }
    }
    let n = count.ok_or_else(|| perr(last_line, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|(p, _)| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(perr(last_line, "vertex element lacks x/y/z")),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        (None, None, None) => None,
        _ => return Err(perr(last_line, "incomplete red/green/blue properties")),
    };
    let label_col = col("label");

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut vals = vec![0.0f64; props.len()];
    for _ in 0..n {
        let (ln, line) = loop {
            match lines.next() {
                Some((_, "")) => continue,
                Some(v) => break v,
                None => return Err(perr(last_line + 1, format!("expected {n} vertices, found {}", positions.len()))),
            }
        };
        last_line = ln;
        let mut it = line.split_whitespace();
        for (slot, (pname, kind)) in vals.iter_mut().zip(&props) {
            let t = it.next().ok_or_else(|| perr(ln, format!("missing value for '{pname}'")))?;
            *slot = match kind {
                Kind::Float => t.parse::<f64>().ok().filter(|v| v.is_finite()),
                _ => t.parse::<i64>().ok().map(|v| v as f64),
            }
            .ok_or_else(|| perr(ln, format!("bad value '{t}' for '{pname}'")))?;
            if *kind == Kind::UChar && !(0.0..=255.0).contains(slot) {
                return Err(perr(ln, format!("'{pname}' out of uchar range")));
            }
        }
        if it.next().is_some() {
            return Err(perr(ln, "too many values on vertex line"));
        }
        positions.push([vals[x] as f32, vals[y] as f32, vals[z] as f32]);
        colors.push(match rgb {
            Some(c) => c.map(|j| match props[j].1 {
                Kind::Float => vals[j] as f32,
                _ => (vals[j] / 255.0) as f32,
            }),
            None => [0.5; 3],
        });
        if let Some(j) = label_col {
            if vals[j] < 0.0 || vals[j] > u32::MAX as f64 {
                return Err(perr(ln, "negative or oversized label"));
            }
            labels.push(vals[j] as u32);
        }
    }
    if let Some((ln, extra)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(perr(ln, format!("body has more than {n} vertices (found '{extra}')")));
    }
    let labels = if label_col.is_none() || labels.iter().all(|&l| l == UNLABELED) {
        None
    } else if labels.contains(&UNLABELED) {
        return Err(perr(last_line, "mix of labelled and unlabelled points"));
    } else {
        Some(labels)
    };
    LabeledCloud::from_xyz_rgb(name, positions, &colors, labels)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<LabeledCloud> {
    let path = path.as_ref();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
    parse_ply(&std::fs::read_to_string(path)?, stem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledCloud {
        LabeledCloud::from_xyz_rgb(
            "demo",
            vec![[0.1, -2.5, 3.25], [1e-7, 7.0, 0.333_333_34]],
            &[[1.0, 0.0, 128.0 / 255.0], [0.2, 0.4, 0.6].map(|v: f32| (v * 255.0).round() / 255.0)],
            Some(vec![3, 0]),
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(parse_ply(&write_ply(&c), "x").unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        save_ply(&c, &path).unwrap();
        assert_eq!(load_ply(&path).unwrap(), c);
    }

    #[test]
    fn unlabelled_round_trip() {
        let c = LabeledCloud { labels: None, ..sample() };
        assert_eq!(parse_ply(&write_ply(&c), "x").unwrap().labels, None);
    }

    #[test]
    fn missing_label_property() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
                    property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 0\n";
        let c = parse_ply(text, "n").unwrap();
        assert_eq!(c.labels, None);
        assert_eq!(c.color(0), [1.0, 0.0, 0.0]);
        assert_eq!(c.name, "n");
    }

    #[test]
    fn count_mismatch_reports_line() {
        let text = write_ply(&sample()).replace("element vertex 2", "element vertex 3");
        match parse_ply(&text, "x") {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 15),
            other => panic!("{other:?}"),
        }
        let text = write_ply(&sample()).replace("element vertex 2", "element vertex 1");
        assert!(matches!(parse_ply(&text, "x"), Err(SceneError::Parse { line: 14, .. })));
    }

    #[test]
    fn malformed_header() {
        assert!(matches!(parse_ply("plx\n", "x"), Err(SceneError::Parse { line: 1, .. })));
        let text = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(matches!(parse_ply(text, "x"), Err(SceneError::Parse { line: 2, .. })));
    }
}
