//! Line-oriented annotation index, versioned header `MLA-ANN 1`.
//!
//! ```text
//! MLA-ANN 1
//! <image-path>\t<n>\t<x1> <y1> <x2> <y2> ... <xn> <yn>
//! ```
//!
//! One record per image. Paths are relative to the index file; the image
//! id is the file stem. Coordinates are sub-pixel decimals in pixel
//! units, x before y, half-open bounds `[0, W) x [0, H)`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{data_err, format_err, Result};
use crate::io::pnm;
use super::AnnotatedImage;

pub const INDEX_HEADER: &str = "MLA-ANN 1";

fn record_line(path: &str, points: &[(f64, f64)]) -> String {
    let mut line = format!("{path}\t{}\t", points.len());
    for (i, (x, y)) in points.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{x:.4} {y:.4}");
    }
    line
}

fn parse_record(line: &str) -> Option<(String, Vec<(f64, f64)>)> {
    let mut fields = line.splitn(3, '\t');
    let path = fields.next()?.trim();
    if path.is_empty() {
        return None;
    }
    let n: usize = fields.next()?.trim().parse().ok()?;
    let coord_field = fields.next().unwrap_or("");
    let coords: Vec<f64> = coord_field
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    if coords.len() != 2 * n {
        return None;
    }
    let points = coords.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    Some((path.to_string(), points))
}

fn id_of(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Parse an index and load every referenced image. All bad records are
/// collected into one report, each named by record index.
pub fn load_annotations(index_path: &Path) -> Result<Vec<AnnotatedImage>> {
    let text = std::fs::read_to_string(index_path)
        .map_err(|e| data_err!("cannot read index {}: {e}", index_path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == INDEX_HEADER => {}
        other => {
            return Err(format_err!(
                "index header is {:?}, expected {:?}",
                other.unwrap_or(""),
                INDEX_HEADER
            ))
        }
    }
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut problems = Vec::new();
    for (record, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let Some((rel_path, points)) = parse_record(line) else {
            problems.push(format!("record {record}: malformed line"));
            continue;
        };
        let image_path: PathBuf = base.join(&rel_path);
        let raster = match pnm::read_image(&image_path) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!(
                    "record {record}: cannot load image {}: {e}",
                    image_path.display()
                ));
                continue;
            }
        };
        match AnnotatedImage::new(raster.to_rgb_tensor(), points, id_of(&rel_path)) {
            Ok(sample) => samples.push(sample),
            Err(e) => problems.push(format!("record {record}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(data_err!(
            "{} bad record(s):\n  {}",
            problems.len(),
            problems.join("\n  ")
        ));
    }
    Ok(samples)
}

/// Write samples as 8-bit PNM images plus an index file, loadable by
/// [`load_annotations`]. Returns the index path.
pub fn save_dataset(dir: &Path, samples: &[AnnotatedImage]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for sample in samples {
        let file = format!("{}.pnm", sample.id);
        pnm::write_pnm(&dir.join(&file), &sample.image)?;
        let points: Vec<(f64, f64)> = sample.points.iter().collect();
        index.push_str(&record_line(&file, &points));
        index.push('\n');
    }
    let index_path = dir.join("index.mla");
    std::fs::write(&index_path, index)?;
    Ok(index_path)
}

/// Convert foreign point annotations (one CSV/TSV or JSON point list per
/// image) into plain point lists for building an index.
///
/// Supported per-image formats:
/// - CSV/TSV: one `x,y` (or `x<TAB>y`, or `x y`) pair per line, `#`
///   comments ignored;
/// - JSON: `[[x, y], ...]` or `{"points": [[x, y], ...]}`.
pub fn parse_foreign_points(text: &str, kind: ForeignKind) -> Result<Vec<(f64, f64)>> {
    match kind {
        ForeignKind::Csv => {
            let mut points = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let fields: Vec<&str> = line
                    .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
                    .filter(|f| !f.is_empty())
                    .collect();
                if fields.len() < 2 {
                    return Err(format_err!("line {}: expected 'x,y'", i + 1));
                }
                let x: f64 = fields[0]
                    .parse()
                    .map_err(|_| format_err!("line {}: bad x value '{}'", i + 1, fields[0]))?;
                let y: f64 = fields[1]
                    .parse()
                    .map_err(|_| format_err!("line {}: bad y value '{}'", i + 1, fields[1]))?;
                points.push((x, y));
            }
            Ok(points)
        }
        ForeignKind::Json => {
            let value: serde_json::Value = serde_json::from_str(text)
                .map_err(|e| format_err!("bad JSON: {e}"))?;
            let list = value
                .get("points")
                .unwrap_or(&value)
                .as_array()
                .ok_or_else(|| format_err!("expected a JSON array of [x, y] pairs"))?;
            list.iter()
                .enumerate()
                .map(|(i, pair)| {
                    let coords = pair
                        .as_array()
                        .filter(|a| a.len() >= 2)
                        .ok_or_else(|| format_err!("point {i}: expected [x, y]"))?;
                    let x = coords[0]
                        .as_f64()
                        .ok_or_else(|| format_err!("point {i}: x is not a number"))?;
                    let y = coords[1]
                        .as_f64()
                        .ok_or_else(|| format_err!("point {i}: y is not a number"))?;
                    Ok((x, y))
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForeignKind {
    Csv,
    Json,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("ann_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn sample(id: &str, points: Vec<(f64, f64)>) -> AnnotatedImage {
        let image = Tensor::<f64>::from_fn(&[3, 8, 8], |i| ((i % 11) as f64) / 11.0);
        AnnotatedImage::new(image, points, id.into()).unwrap()
    }

    #[test]
    fn empty_index_loads_to_empty_list() {
        let dir = tmp_dir("empty");
        let index = dir.join("index.mla");
        std::fs::write(&index, format!("{INDEX_HEADER}\n")).unwrap();
        assert!(load_annotations(&index).unwrap().is_empty());
    }

    #[test]
    fn dataset_round_trip_preserves_ids_counts_coordinates() {
        let dir = tmp_dir("round_trip");
        let samples = vec![
            sample("a", vec![(1.25, 2.5), (6.75, 7.0)]),
            sample("b", vec![]),
            sample("c", vec![(0.0, 0.0)]),
        ];
        let index = save_dataset(&dir, &samples).unwrap();
        let loaded = load_annotations(&index).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.points.len(), back.points.len());
            for ((x0, y0), (x1, y1)) in orig.points.iter().zip(back.points.iter()) {
                assert!((x0 - x1).abs() < 1e-3 && (y0 - y1).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn boundary_point_is_rejected_with_record_index() {
        let dir = tmp_dir("oob");
        let ok = sample("ok", vec![]);
        save_dataset(&dir, &[ok]).unwrap();
        // Append a record whose point sits exactly at x = W on an 8-wide image.
        let index = dir.join("index.mla");
        let mut text = std::fs::read_to_string(&index).unwrap();
        text.push_str("ok.pnm\t1\t8.0 0.0\n");
        std::fs::write(&index, text).unwrap();
        let err = load_annotations(&index).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
    }

    #[test]
    fn missing_image_and_malformed_lines_are_named() {
        let dir = tmp_dir("bad");
        let index = dir.join("index.mla");
        std::fs::write(
            &index,
            format!("{INDEX_HEADER}\nmissing.pnm\t1\t1.0 1.0\nnot a record\n"),
        )
        .unwrap();
        let err = load_annotations(&index).unwrap_err().to_string();
        assert!(err.contains("record 0") && err.contains("record 1"), "{err}");
    }

    #[test]
    fn wrong_header_is_a_format_error() {
        let dir = tmp_dir("header");
        let index = dir.join("index.mla");
        std::fs::write(&index, "MLA-ANN 2\n").unwrap();
        assert!(load_annotations(&index).is_err());
    }

    #[test]
    fn foreign_csv_and_json_parse_identically() {
        let csv = "# header comment\n12.5, 3.25\n7 9\n";
        let json = r#"{"points": [[12.5, 3.25], [7, 9]]}"#;
        let a = parse_foreign_points(csv, ForeignKind::Csv).unwrap();
        let b = parse_foreign_points(json, ForeignKind::Json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![(12.5, 3.25), (7.0, 9.0)]);
    }
}
