//! Canonical manifest files plus COCO and Pascal VOC adapters.
//!
//! Canonical schema:
//!
//! ```text
//! { "classes": [string],
//!   "images": [{ "id": int, "file": string, "width": int, "height": int }],
//!   "annotations": [{ "image_id": int, "class": string, "bbox": [x, y, w, h] }],
//!   "provenance": [...] }        // optional, synthetic images only
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Annotation, BoundingBox, DataError, DatasetManifest, Provenance};

#[derive(Serialize, Deserialize)]
struct CanonicalFile {
    classes: Vec<String>,
    images: Vec<CanonicalImage>,
    annotations: Vec<CanonicalAnnotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    provenance: Vec<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct CanonicalImage {
    id: u64,
    file: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CanonicalAnnotation {
    image_id: u64,
    class: String,
    bbox: [u32; 4],
}

fn parse_error(file: &str, line: usize, message: impl Into<String>) -> DataError {
    DataError::ParseError {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let file = CanonicalFile {
        classes: m.classes.clone(),
        images: m
            .images
            .iter()
            .map(|i| CanonicalImage {
                id: i.id,
                file: i.file.clone(),
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations: m
            .images
            .iter()
            .flat_map(|i| {
                i.annotations.iter().map(move |a| CanonicalAnnotation {
                    image_id: i.id,
                    class: a.class_label.clone(),
                    bbox: a.bbox.to_array(),
                })
            })
            .collect(),
        provenance: m.provenance.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("manifest serializes");
    s.push('\n');
    s
}

/// Parses canonical JSON; `label` names the source in error messages.
pub fn manifest_from_str(text: &str, label: &str) -> Result<DatasetManifest, DataError> {
    let file: CanonicalFile = serde_json::from_str(text)
        .map_err(|e| parse_error(label, e.line(), e.to_string()))?;
    let mut m = DatasetManifest::new(file.classes);
    let mut index = BTreeMap::new();
    for img in file.images {
        if index.insert(img.id, m.images.len()).is_some() {
            return Err(parse_error(label, 0, format!("duplicate image id {}", img.id)));
        }
        m.images.push(AnnotatedImage {
            id: img.id,
            file: img.file,
            width: img.width,
            height: img.height,
            annotations: Vec::new(),
            pixels: None,
        });
    }
    for (n, a) in file.annotations.into_iter().enumerate() {
        let &slot = index.get(&a.image_id).ok_or_else(|| {
            parse_error(label, 0, format!("annotation {n} refers to unknown image {}", a.image_id))
        })?;
        let [x, y, w, h] = a.bbox;
        let bbox = BoundingBox::new(x, y, w, h)
            .map_err(|e| parse_error(label, 0, format!("annotation {n}: {e}")))?;
        m.images[slot].annotations.push(Annotation {
            class_label: a.class,
            bbox,
        });
    }
    m.provenance = file.provenance;
    m.validate()
        .map_err(|e| parse_error(label, 0, e.to_string()))?;
    Ok(m)
}

/// Loads a canonical manifest; image paths resolve against its directory.
pub fn load_canonical(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut m = manifest_from_str(&text, &path.display().to_string())?;
    m.root = Some(
        path.parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    );
    Ok(m)
}

pub fn save_canonical(m: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, manifest_to_string(m)).map_err(|e| io_error(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// Category ids are 1-based positions in the manifest's class list.
pub fn export_coco(m: &DatasetManifest) -> CocoFile {
    let cat_id: BTreeMap<&str, u64> = m
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u64 + 1))
        .collect();
    let mut annotations = Vec::new();
    for img in &m.images {
        for a in &img.annotations {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: img.id,
                category_id: cat_id[a.class_label.as_str()],
                bbox: a.bbox.to_array().map(f64::from),
                area: a.bbox.area() as f64,
                iscrowd: 0,
            });
        }
    }
    CocoFile {
        images: m
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.id,
                file_name: i.file.clone(),
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations,
        categories: m
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| CocoCategory {
                id: i as u64 + 1,
                name: c.clone(),
            })
            .collect(),
    }
}

/// Reads COCO boxes back into integer pixel boxes; non-integral boxes are rejected.
pub fn import_coco(coco: &CocoFile, label: &str) -> Result<DatasetManifest, DataError> {
    let mut cats = coco.categories.clone();
    cats.sort_by_key(|c| c.id);
    let names: BTreeMap<u64, String> = cats.iter().map(|c| (c.id, c.name.clone())).collect();
    let mut m = DatasetManifest::new(cats.into_iter().map(|c| c.name).collect());
    let mut index = BTreeMap::new();
    for img in &coco.images {
        index.insert(img.id, m.images.len());
        m.images.push(AnnotatedImage {
            id: img.id,
            file: img.file_name.clone(),
            width: img.width,
            height: img.height,
            annotations: Vec::new(),
            pixels: None,
        });
    }
    let mut anns: Vec<&CocoAnnotation> = coco.annotations.iter().collect();
    anns.sort_by_key(|a| a.id);
    for a in anns {
        let slot = *index.get(&a.image_id).ok_or_else(|| {
            parse_error(label, 0, format!("annotation {} refers to unknown image {}", a.id, a.image_id))
        })?;
        let class = names.get(&a.category_id).ok_or_else(|| {
            parse_error(label, 0, format!("annotation {} has unknown category {}", a.id, a.category_id))
        })?;
        let mut ints = [0u32; 4];
        for (dst, &v) in ints.iter_mut().zip(&a.bbox) {
            if v.fract() != 0.0 || v < 0.0 || v > f64::from(u32::MAX) {
                return Err(parse_error(
                    label,
                    0,
                    format!("annotation {} has non-integral bbox {:?}", a.id, a.bbox),
                ));
            }
            *dst = v as u32;
        }
        let bbox = BoundingBox::new(ints[0], ints[1], ints[2], ints[3])
            .map_err(|e| parse_error(label, 0, e.to_string()))?;
        m.images[slot].annotations.push(Annotation {
            class_label: class.clone(),
            bbox,
        });
    }
    m.validate().map_err(|e| parse_error(label, 0, e.to_string()))?;
    Ok(m)
}

/// Parses one Pascal VOC XML record.
///
fn voc_line(n: roxmltree::Node<'_, '_>) -> usize {
    n.document().text_pos_at(n.range().start).row as usize
}

fn voc_child<'a, 'i>(n: roxmltree::Node<'a, 'i>, tag: &str, label: &str) -> Result<roxmltree::Node<'a, 'i>, DataError> {
    n.children()
        .find(|c| c.has_tag_name(tag))
        .ok_or_else(|| parse_error(label, voc_line(n), format!("missing <{tag}>")))
}

fn voc_number(n: roxmltree::Node<'_, '_>, tag: &str, label: &str) -> Result<f64, DataError> {
    let c = voc_child(n, tag, label)?;
    let raw = c.text().unwrap_or("").trim();
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_error(label, voc_line(c), format!("<{tag}> is not a number: `{raw}`")))
}

/// VOC pixel coordinates are 1-based and `xmax`/`ymax` are inclusive, so a
/// box spans `x = xmin - 1` with `w = xmax - xmin + 1`. Files written with
/// 0-based coordinates (`xmin = 0`) are accepted as-is.
pub fn import_voc_str(
    text: &str,
    label: &str,
    id: u64,
    image_prefix: &str,
) -> Result<AnnotatedImage, DataError> {
    let doc = roxmltree::Document::parse(text)
        .map_err(|e| parse_error(label, e.pos().row as usize, e.to_string()))?;
    let root = doc.root_element();
    let child = |n, tag| voc_child(n, tag, label);
    let number = |n, tag| voc_number(n, tag, label);

    let filename = child(root, "filename")?.text().unwrap_or("").trim().to_string();
    let size = child(root, "size")?;
    let width = number(size, "width")?.round() as u32;
    let height = number(size, "height")?.round() as u32;

    let mut annotations = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child(obj, "name")?.text().unwrap_or("").trim().to_string();
        let bnd = child(obj, "bndbox")?;
        let xmin = number(bnd, "xmin")?.round() as i64;
        let ymin = number(bnd, "ymin")?.round() as i64;
        let xmax = number(bnd, "xmax")?.round() as i64;
        let ymax = number(bnd, "ymax")?.round() as i64;
        if xmin < 0 || ymin < 0 || xmax < xmin || ymax < ymin {
            return Err(parse_error(
                label,
                voc_line(bnd),
                format!("degenerate box ({xmin},{ymin})-({xmax},{ymax})"),
            ));
        }
        let bbox = BoundingBox {
            x: (xmin.max(1) - 1) as u32,
            y: (ymin.max(1) - 1) as u32,
            w: (xmax - xmin + 1) as u32,
            h: (ymax - ymin + 1) as u32,
        };
        if !bbox.fits_within(width, height) {
            return Err(parse_error(
                label,
                voc_line(bnd),
                format!("box {bbox:?} leaves the {width}x{height} image"),
            ));
        }
        annotations.push(Annotation {
            class_label: name,
            bbox,
        });
    }
    Ok(AnnotatedImage {
        id,
        file: format!("{image_prefix}{filename}"),
        width,
        height,
        annotations,
        pixels: None,
    })
}

/// Imports every `*.xml` file of `dir` in file-name order; ids follow that order.
///
/// `image_prefix` is prepended to each `<filename>` (for example
/// `"../JPEGImages/"`) so image paths stay relative to `dir`.
pub fn import_voc(dir: &Path, image_prefix: &str) -> Result<DatasetManifest, DataError> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")))
        .collect();
    files.sort();
    let mut images = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        images.push(import_voc_str(
            &text,
            &path.display().to_string(),
            i as u64,
            image_prefix,
        )?);
    }
    let classes: BTreeSet<String> = images
        .iter()
        .flat_map(|i| i.annotations.iter().map(|a| a.class_label.clone()))
        .collect();
    let mut m = DatasetManifest::new(classes.into_iter().collect());
    m.images = images;
    m.root = Some(dir.to_path_buf());
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const VOC: &str = r#"<annotation>
  <folder>IMAGES</folder>
  <filename>inclusion_1.jpg</filename>
  <size><width>200</width><height>200</height><depth>1</depth></size>
  <object>
    <name>inclusion</name>
    <bndbox><xmin>10</xmin><ymin>20</ymin><xmax>13</xmax><ymax>29</ymax></bndbox>
  </object>
  <object>
    <name>inclusion</name>
    <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>200</xmax><ymax>200</ymax></bndbox>
  </object>
</annotation>"#;

    #[test]
    fn voc_inclusive_convention() {
        let img = import_voc_str(VOC, "a.xml", 0, "").unwrap();
        assert_eq!(img.annotations[0].bbox.w, 4);
        assert_eq!(img.annotations[0].bbox.h, 10);
        assert_eq!(img.annotations[0].bbox.x, 9);
        assert_eq!(img.annotations[1].bbox, BoundingBox::new(0, 0, 200, 200).unwrap());
        assert_eq!(img.file, "inclusion_1.jpg");
    }

    #[test]
    fn voc_errors_carry_line() {
        let bad = VOC.replace("<xmax>13</xmax>", "<xmax>abc</xmax>");
        match import_voc_str(&bad, "b.xml", 0, "") {
            Err(DataError::ParseError { file, line, .. }) => {
                assert_eq!(file, "b.xml");
                assert_eq!(line, 7);
            }
            other => panic!("unexpected {other:?}"),
        }
        let broken = "<annotation><filename>x</filename>";
        assert!(matches!(
            import_voc_str(broken, "c.xml", 0, ""),
            Err(DataError::ParseError { .. })
        ));
    }

    #[test]
    fn empty_canonical_and_coco() {
        let m = DatasetManifest::new(vec![]);
        let text = manifest_to_string(&m);
        assert_eq!(manifest_from_str(&text, "x").unwrap(), m);
        let coco = export_coco(&m);
        assert!(coco.images.is_empty());
        assert_eq!(import_coco(&coco, "x").unwrap(), m);
    }

    #[test]
    fn canonical_parse_error_has_line() {
        let text = "{\n \"classes\": [],\n \"images\": [ oops ]\n}";
        match manifest_from_str(text, "m.json") {
            Err(DataError::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coco_rejects_fractional_boxes() {
        let mut m = DatasetManifest::new(vec!["a".into()]);
        m.images.push(AnnotatedImage {
            id: 3,
            file: "x.png".into(),
            width: 10,
            height: 10,
            annotations: vec![Annotation {
                class_label: "a".into(),
                bbox: BoundingBox::new(1, 2, 3, 4).unwrap(),
            }],
            pixels: None,
        });
        let mut coco = export_coco(&m);
        assert_eq!(coco.annotations[0].bbox, [1.0, 2.0, 3.0, 4.0]);
        coco.annotations[0].bbox[0] = 1.5;
        assert!(import_coco(&coco, "c.json").is_err());
    }
}
