use std::path::Path;

use serde::Deserialize;

use super::DetectError;
use crate::datakit::{BoundingBox, DatasetManifest};
use crate::evalkit::Detection;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    image_id: u64,
    class: String,
    bbox: Vec<f64>,
    score: f64,
}

fn to_box(row: &Row) -> Result<BoundingBox, String> {
    if row.bbox.len() != 4 {
        return Err(format!("expected 4 values, got {}", row.bbox.len()));
    }
    let mut v = [0u32; 4];
    for (slot, &f) in v.iter_mut().zip(&row.bbox) {
        if !f.is_finite() || f.fract() != 0.0 || f < 0.0 || f > f64::from(u32::MAX) {
            return Err(format!("{f} is not a non-negative integer"));
        }
        *slot = f as u32;
    }
    BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|_| "zero width or height".to_string())
}

/// Parses detections in the shared predictions schema
/// `[{ "image_id", "class", "bbox": [x, y, w, h], "score" }]`.
///
/// With a manifest, every detection must name a known image and lie inside it.
pub fn parse_predictions(
    text: &str,
    label: &str,
    manifest: Option<&DatasetManifest>,
) -> Result<Vec<Detection>, DetectError> {
    let rows: Vec<Row> = serde_json::from_str(text).map_err(|e| DetectError::ParseError {
        file: label.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    rows.into_iter()
        .map(|row| {
            let invalid = |reason: String| DetectError::InvalidBox {
                image_id: row.image_id,
                bbox: row.bbox.clone(),
                reason,
            };
            let bbox = to_box(&row).map_err(invalid)?;
            if let Some(m) = manifest {
                let img = m
                    .image(row.image_id)
                    .ok_or_else(|| invalid("unknown image id".to_string()))?;
                if !bbox.fits_within(img.width, img.height) {
                    return Err(invalid(format!("outside {}x{} image", img.width, img.height)));
                }
            }
            Ok(Detection {
                image_id: row.image_id,
                class_label: row.class,
                bbox,
                score: row.score,
            })
        })
        .collect()
}

pub fn import_predictions(path: &Path, manifest: Option<&DatasetManifest>) -> Result<Vec<Detection>, DetectError> {
    let text = std::fs::read_to_string(path).map_err(|source| DetectError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_predictions(&text, &path.display().to_string(), manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::AnnotatedImage;
    use crate::evalkit::export_predictions;

    #[test]
    fn round_trip_with_export() {
        let dets = vec![Detection {
            image_id: 3,
            class_label: "scratch".into(),
            bbox: BoundingBox::new(1, 2, 3, 4).unwrap(),
            score: 0.25,
        }];
        let back = parse_predictions(&export_predictions(&dets), "p.json", None).unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn errors_carry_location() {
        let err = parse_predictions("[\n{\"image_id\": 1,\n \"class\": 5}]", "p.json", None).unwrap_err();
        assert!(matches!(err, DetectError::ParseError { line: 3, .. }), "{err}");
        let bad = r#"[{"image_id": 7, "class": "a", "bbox": [0, 0, 0, 3], "score": 0.5}]"#;
        assert!(matches!(
            parse_predictions(bad, "p.json", None),
            Err(DetectError::InvalidBox { image_id: 7, .. })
        ));
    }

    #[test]
    fn manifest_bounds_checked() {
        let mut m = DatasetManifest::new(vec!["a".into()]);
        m.images.push(AnnotatedImage {
            id: 1,
            file: "1.png".into(),
            width: 10,
            height: 10,
            annotations: vec![],
            pixels: None,
        });
        let ok = r#"[{"image_id": 1, "class": "a", "bbox": [5, 5, 5, 5], "score": 0.5}]"#;
        assert_eq!(parse_predictions(ok, "p", Some(&m)).unwrap().len(), 1);
        let out = r#"[{"image_id": 1, "class": "a", "bbox": [6, 5, 5, 5], "score": 0.5}]"#;
        assert!(matches!(parse_predictions(out, "p", Some(&m)), Err(DetectError::InvalidBox { image_id: 1, .. })));
        let unknown = r#"[{"image_id": 2, "class": "a", "bbox": [0, 0, 1, 1], "score": 0.5}]"#;
        assert!(parse_predictions(unknown, "p", Some(&m)).is_err());
    }
}
