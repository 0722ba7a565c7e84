//! COCO-format annotation I/O. Unknown fields are preserved across a
//! read/write round trip via flattened capture maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Absolute pixels, [x, y, w, h] with (x, y) the top-left corner.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CocoDataset {
    pub fn annotations_for(&self, image_id: u64) -> Vec<&CocoAnnotation> {
        self.annotations.iter().filter(|a| a.image_id == image_id).collect()
    }
}

pub fn read_coco(path: &Path) -> Result<CocoDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::parse(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

pub fn write_coco(path: &Path, dataset: &CocoDataset) -> Result<()> {
    let text = serde_json::to_string_pretty(dataset)
        .map_err(|e| Error::parse(format!("serializing COCO: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// COCO absolute [x, y, w, h] to normalized (cx, cy, w, h) in [0, 1].
pub fn bbox_to_normalized(bbox: &[f64; 4], img_w: f64, img_h: f64) -> [f64; 4] {
    [
        (bbox[0] + bbox[2] / 2.0) / img_w,
        (bbox[1] + bbox[3] / 2.0) / img_h,
        bbox[2] / img_w,
        bbox[3] / img_h,
    ]
}

/// Inverse of `bbox_to_normalized`.
pub fn bbox_from_normalized(norm: &[f64; 4], img_w: f64, img_h: f64) -> [f64; 4] {
    let w = norm[2] * img_w;
    let h = norm[3] * img_h;
    [norm[0] * img_w - w / 2.0, norm[1] * img_h - h / 2.0, w, h]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_fixture_parses() {
        let dir = std::env::temp_dir().join("dfkd_coco_min");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("min.json");
        fs::write(
            &path,
            r#"{
              "images": [{"id": 1, "width": 64, "height": 48, "file_name": "a.ppm", "license": 3}],
              "annotations": [{"id": 1, "image_id": 1, "category_id": 2, "bbox": [4.0, 6.0, 10.0, 8.0], "area": 80.0, "iscrowd": 0}],
              "categories": [{"id": 2, "name": "cross"}],
              "info": {"year": 2025}
            }"#,
        )
        .unwrap();
        let ds = read_coco(&path).unwrap();
        assert_eq!(ds.images[0].width, 64);
        assert_eq!(ds.annotations[0].bbox, [4.0, 6.0, 10.0, 8.0]);
        assert_eq!(ds.categories[0].name, "cross");
        // Unknown fields preserved.
        assert_eq!(ds.images[0].extra["license"], 3);
        assert_eq!(ds.annotations[0].extra["iscrowd"], 0);
        assert_eq!(ds.extra["info"]["year"], 2025);

        let out = dir.join("roundtrip.json");
        write_coco(&out, &ds).unwrap();
        let again = read_coco(&out).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn malformed_file_reports_position() {
        let dir = std::env::temp_dir().join("dfkd_coco_bad");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        fs::write(&path, "{\n  \"images\": [,]\n}").unwrap();
        let err = read_coco(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "missing position context: {msg}");
    }

    #[test]
    fn bbox_conversion_roundtrip() {
        let cases = [
            [4.0, 6.0, 10.0, 8.0],
            [0.0, 0.0, 64.0, 48.0],
            [13.25, 7.5, 3.75, 22.0],
        ];
        for bbox in cases {
            let norm = bbox_to_normalized(&bbox, 64.0, 48.0);
            assert!(norm.iter().all(|v| (0.0..=1.0).contains(v)));
            let back = bbox_from_normalized(&norm, 64.0, 48.0);
            for (a, b) in bbox.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
