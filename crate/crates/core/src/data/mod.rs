//! Procedural desk-scale datasets and persistence.
//!
//! Classification images are single-channel shapes in [-1, 1]; detection
//! scenes are RGB canvases in [0, 255] with COCO-format annotations. All
//! generation is a pure function of the spec (including its seed).

pub mod ckpt;
pub mod coco;
pub mod image_io;
pub mod kvcfg;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use coco::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};

/// Shape family rendered for a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Bars,
    Crosses,
    Disks,
    Rings,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] =
        [ShapeFamily::Bars, ShapeFamily::Crosses, ShapeFamily::Disks, ShapeFamily::Rings];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Bars => "bars",
            ShapeFamily::Crosses => "crosses",
            ShapeFamily::Disks => "disks",
            ShapeFamily::Rings => "rings",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::parse(format!("unknown shape family '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub shapes: Vec<ShapeFamily>,
    pub noise: f64,
    pub seed: u64,
}

impl ClassificationDatasetSpec {
    /// Three visually distinct classes on 16x16 grayscale; the teacher
    /// separates them to >95% train accuracy within a few epochs.
    pub fn desk_default(seed: u64) -> Self {
        ClassificationDatasetSpec {
            num_classes: 3,
            samples_per_class: 150,
            image_size: 16,
            channels: 1,
            shapes: vec![ShapeFamily::Bars, ShapeFamily::Crosses, ShapeFamily::Disks],
            noise: 0.12,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > self.shapes.len() {
            return Err(Error::config(format!(
                "classification spec: {} classes but {} shape families",
                self.num_classes,
                self.shapes.len()
            )));
        }
        if self.channels != 1 {
            return Err(Error::config("classification spec: only single-channel images are generated".to_string()));
        }
        if self.samples_per_class == 0 || self.image_size < 8 {
            return Err(Error::config("classification spec: degenerate sample count or image size".to_string()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config(format!("classification spec: noise {} outside [0, 0.5]", self.noise)));
        }
        Ok(())
    }
}

/// Images plus integer labels; every image tensor is [C, H, W].
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationDataset {
    pub spec: ClassificationDatasetSpec,
    pub train: LabeledImages,
    pub val: LabeledImages,
    pub test: LabeledImages,
}

fn coverage(signed_dist: f64) -> f64 {
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

/// Box signed distance (Chebyshev form, adequate for axis-aligned shapes).
fn rect_dist(x: f64, y: f64, cx: f64, cy: f64, hw: f64, hh: f64) -> f64 {
    let dx = (x - cx).abs() - hw;
    let dy = (y - cy).abs() - hh;
    dx.max(dy)
}

fn shape_coverage(family: ShapeFamily, x: f64, y: f64, geom: &ShapeGeom) -> f64 {
    match family {
        ShapeFamily::Bars => coverage(rect_dist(x, y, geom.cx, geom.cy, geom.a, geom.b)),
        ShapeFamily::Crosses => {
            let horiz = rect_dist(x, y, geom.cx, geom.cy, geom.b, geom.a * 0.45);
            let vert = rect_dist(x, y, geom.cx, geom.cy, geom.a * 0.45, geom.b);
            coverage(horiz.min(vert))
        }
        ShapeFamily::Disks => {
            let d = ((x - geom.cx).powi(2) + (y - geom.cy).powi(2)).sqrt() - geom.a;
            coverage(d)
        }
        ShapeFamily::Rings => {
            let r = ((x - geom.cx).powi(2) + (y - geom.cy).powi(2)).sqrt();
            coverage((r - geom.a).abs() - geom.b)
        }
    }
}

struct ShapeGeom {
    cx: f64,
    cy: f64,
    /// Primary extent: bar half-width, cross stroke scale, disk/ring radius.
    a: f64,
    /// Secondary extent: bar half-height, cross arm half-length, ring half-thickness.
    b: f64,
}

fn sample_geom(family: ShapeFamily, size: f64, rng: &mut Rng) -> ShapeGeom {
    let u = size / 16.0;
    let jitter = |rng: &mut Rng, lo: f64, hi: f64| rng.uniform(lo, hi);
    match family {
        ShapeFamily::Bars => ShapeGeom {
            cx: jitter(rng, 0.3 * size, 0.7 * size),
            cy: 0.5 * size + jitter(rng, -1.0, 1.0) * u,
            a: jitter(rng, 1.0, 1.8) * u,
            b: jitter(rng, 5.0, 6.5) * u,
        },
        ShapeFamily::Crosses => ShapeGeom {
            cx: 0.5 * size + jitter(rng, -1.5, 1.5) * u,
            cy: 0.5 * size + jitter(rng, -1.5, 1.5) * u,
            a: jitter(rng, 1.6, 2.4) * u,
            b: jitter(rng, 4.5, 6.0) * u,
        },
        ShapeFamily::Disks => ShapeGeom {
            cx: 0.5 * size + jitter(rng, -2.0, 2.0) * u,
            cy: 0.5 * size + jitter(rng, -2.0, 2.0) * u,
            a: jitter(rng, 3.2, 4.5) * u,
            b: 0.0,
        },
        ShapeFamily::Rings => ShapeGeom {
            cx: 0.5 * size + jitter(rng, -1.5, 1.5) * u,
            cy: 0.5 * size + jitter(rng, -1.5, 1.5) * u,
            a: jitter(rng, 3.5, 4.8) * u,
            b: jitter(rng, 0.9, 1.4) * u,
        },
    }
}

fn render_classification_image(
    family: ShapeFamily,
    size: usize,
    noise: f64,
    rng: &mut Rng,
) -> Tensor {
    let geom = sample_geom(family, size as f64, rng);
    let intensity = rng.uniform(0.8, 1.0);
    let mut data = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let cov = shape_coverage(family, px as f64 + 0.5, py as f64 + 0.5, &geom);
            let mut v = -1.0 + 2.0 * cov * intensity;
            if noise > 0.0 {
                v += rng.uniform(-noise, noise);
            }
            data.push(v.clamp(-1.0, 1.0));
        }
    }
    Tensor::from_vec(vec![1, size, size], data).expect("image shape")
}

/// Deterministic generation with a stratified 70/15/15 split per class.
pub fn gen_classification_dataset(spec: &ClassificationDatasetSpec) -> Result<ClassificationDataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let n = spec.samples_per_class;
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;

    let mut splits: [Vec<(Tensor, usize)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..spec.num_classes {
        let family = spec.shapes[class];
        for i in 0..n {
            let mut rng = root.child((class * n + i) as u64);
            let img = render_classification_image(family, spec.image_size, spec.noise, &mut rng);
            let bucket = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            splits[bucket].push((img, class));
        }
    }
    let mut take = |bucket: usize| {
        let items = std::mem::take(&mut splits[bucket]);
        let (images, labels) = items.into_iter().unzip();
        LabeledImages {
            images,
            labels,
            channels: spec.channels,
            image_size: spec.image_size,
            num_classes: spec.num_classes,
        }
    };
    Ok(ClassificationDataset {
        spec: spec.clone(),
        train: take(0),
        val: take(1),
        test: take(2),
    })
}

// ---------------------------------------------------------------------------
// Detection scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSceneSpec {
    pub canvas: usize,
    pub num_classes: usize,
    pub num_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl DetectionSceneSpec {
    pub fn desk_default(seed: u64) -> Self {
        DetectionSceneSpec {
            canvas: 64,
            num_classes: 3,
            num_images: 240,
            min_objects: 1,
            max_objects: 2,
            jitter: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas < 32 {
            return Err(Error::config(format!("detection spec: canvas {} too small", self.canvas)));
        }
        if self.num_classes == 0 || self.num_classes > 3 {
            return Err(Error::config("detection spec: supports 1..=3 object classes".to_string()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(format!(
                "detection spec: bad object range {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if self.num_images == 0 {
            return Err(Error::config("detection spec: zero images".to_string()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<&'static str> {
        ["disk", "cross", "bar"][..self.num_classes].to_vec()
    }
}

/// Images ([3, S, S] in 0..255) plus COCO annotations.
#[derive(Debug, Clone)]
pub struct DetectionDataset {
    pub spec: DetectionSceneSpec,
    pub images: Vec<Tensor>,
    pub coco: CocoDataset,
}

impl DetectionDataset {
    /// Positional 85/15 train/val split over image indices.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.images.len();
        let n_train = (n * 85) / 100;
        ((0..n_train).collect(), (n_train..n).collect())
    }
}

struct SceneObject {
    class: usize,
    /// Absolute [x, y, w, h] in pixels.
    bbox: [f64; 4],
    geom: ShapeGeom,
    color: [f64; 3],
}

const OBJECT_COLORS: [[f64; 3]; 3] = [
    [225.0, 70.0, 60.0],  // disks: red
    [70.0, 210.0, 90.0],  // crosses: green
    [80.0, 110.0, 230.0], // bars: blue
];

fn detection_family(class: usize) -> ShapeFamily {
    match class {
        0 => ShapeFamily::Disks,
        1 => ShapeFamily::Crosses,
        _ => ShapeFamily::Bars,
    }
}

fn boxes_overlap(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    a[0] - margin < b[0] + b[2] + margin
        && b[0] - margin < a[0] + a[2] + margin
        && a[1] - margin < b[1] + b[3] + margin
        && b[1] - margin < a[1] + a[3] + margin
}

fn sample_scene_object(
    class: usize,
    canvas: f64,
    jitter: f64,
    rng: &mut Rng,
) -> SceneObject {
    let family = detection_family(class);
    let scale = rng.uniform(0.85, 1.15) * jitter.max(0.2);
    let base = canvas / 64.0 * scale;
    let (a, b) = match family {
        ShapeFamily::Disks => (rng.uniform(6.0, 9.0) * base, 0.0),
        ShapeFamily::Crosses => (rng.uniform(2.2, 3.0) * base, rng.uniform(7.0, 10.0) * base),
        _ => (rng.uniform(2.5, 3.5) * base, rng.uniform(8.0, 11.0) * base),
    };
    // Tight half-extents of the rendered shape.
    let (hx, hy) = match family {
        ShapeFamily::Disks => (a, a),
        ShapeFamily::Crosses => (b, b),
        _ => (a, b),
        // rings unused for detection
    };
    let margin = 2.0;
    let cx = rng.uniform(hx + margin, canvas - hx - margin);
    let cy = rng.uniform(hy + margin, canvas - hy - margin);
    let color_base = OBJECT_COLORS[class];
    let color = [
        (color_base[0] + rng.uniform(-20.0, 20.0)).clamp(0.0, 255.0),
        (color_base[1] + rng.uniform(-20.0, 20.0)).clamp(0.0, 255.0),
        (color_base[2] + rng.uniform(-20.0, 20.0)).clamp(0.0, 255.0),
    ];
    SceneObject {
        class,
        bbox: [cx - hx, cy - hy, 2.0 * hx, 2.0 * hy],
        geom: ShapeGeom { cx, cy, a, b },
        color,
    }
}

fn render_scene(objects: &[SceneObject], canvas: usize, rng: &mut Rng) -> Tensor {
    let s = canvas;
    let mut data = vec![0.0; 3 * s * s];
    for py in 0..s {
        for px in 0..s {
            let base = [
                (18.0 + rng.uniform(0.0, 14.0)).clamp(0.0, 255.0),
                (18.0 + rng.uniform(0.0, 14.0)).clamp(0.0, 255.0),
                (22.0 + rng.uniform(0.0, 14.0)).clamp(0.0, 255.0),
            ];
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut pixel = base;
            for obj in objects {
                let cov = shape_coverage(detection_family(obj.class), x, y, &obj.geom);
                if cov > 0.0 {
                    for ch in 0..3 {
                        pixel[ch] = pixel[ch] * (1.0 - cov) + obj.color[ch] * cov;
                    }
                }
            }
            for ch in 0..3 {
                data[(ch * s + py) * s + px] = pixel[ch].clamp(0.0, 255.0);
            }
        }
    }
    Tensor::from_vec(vec![3, s, s], data).expect("scene shape")
}

/// Deterministic scene generation. Objects are emitted left-to-right (by
/// center x) so annotation order is a stable function of the scene.
pub fn gen_detection_dataset(spec: &DetectionSceneSpec) -> Result<DetectionDataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed ^ 0xD57EC7);
    let canvas = spec.canvas as f64;
    let mut images = Vec::with_capacity(spec.num_images);
    let mut coco_images = Vec::with_capacity(spec.num_images);
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for idx in 0..spec.num_images {
        let mut rng = root.child(idx as u64);
        let count = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
        for _ in 0..count {
            let class = rng.below(spec.num_classes);
            for _attempt in 0..50 {
                let cand = sample_scene_object(class, canvas, spec.jitter, &mut rng);
                if objects.iter().all(|o| !boxes_overlap(&o.bbox, &cand.bbox, 2.0)) {
                    objects.push(cand);
                    break;
                }
            }
        }
        objects.sort_by(|a, b| {
            (a.bbox[0] + a.bbox[2] / 2.0)
                .partial_cmp(&(b.bbox[0] + b.bbox[2] / 2.0))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let image_id = (idx + 1) as u64;
        images.push(render_scene(&objects, spec.canvas, &mut rng));
        coco_images.push(CocoImage {
            id: image_id,
            width: spec.canvas as u32,
            height: spec.canvas as u32,
            file_name: format!("img_{image_id:05}.ppm"),
            extra: Default::default(),
        });
        for obj in &objects {
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: (obj.class + 1) as u64,
                bbox: obj.bbox,
                area: obj.bbox[2] * obj.bbox[3],
                extra: Default::default(),
            });
            ann_id += 1;
        }
    }
    let categories = spec
        .class_names()
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: (i + 1) as u64,
            name: (*name).to_string(),
            extra: Default::default(),
        })
        .collect();
    Ok(DetectionDataset {
        spec: spec.clone(),
        images,
        coco: CocoDataset {
            images: coco_images,
            annotations,
            categories,
            extra: Default::default(),
        },
    })
}
