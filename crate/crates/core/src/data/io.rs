use super::png_io::{read_label_png, read_rgb_png, write_label_png, write_rgb_png};
use super::{Instance, LabelSet, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::{boxes_from_corners, convex_hull, gbbox_corners_from_mask, Point, Quad};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
struct Shape {
    label: String,
    points: Vec<[f64; 2]>,
    #[serde(default = "polygon_type")]
    shape_type: String,
}

fn polygon_type() -> String {
    "polygon".into()
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Annotation {
    shapes: Vec<Shape>,
    #[serde(default)]
    image_width: Option<usize>,
    #[serde(default)]
    image_height: Option<usize>,
}

fn paths(root: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        root.join("images").join(format!("{id}.png")),
        root.join("semantic").join(format!("{id}.png")),
        root.join("instances").join(format!("{id}.json")),
    )
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the image, semantic mask and instance polygons of one sample under `root`.
/// Instances are stored as their four corners.
pub fn save_sample(root: &Path, sample: &LabeledSample, labels: &LabelSet) -> Result<()> {
    let (img, sem, inst) = paths(root, &sample.id);
    for dir in ["images", "semantic", "instances"] {
        create_dir(&root.join(dir))?;
    }
    write_rgb_png(&img, sample.width(), sample.height(), &sample.rgb())?;
    write_label_png(&sem, &sample.semantic, &labels.palette())?;
    let shapes = sample
        .instances
        .iter()
        .map(|i| {
            let label = labels
                .name(i.class)
                .ok_or_else(|| Error::InvalidArgument(format!("instance class {} has no name", i.class)))?;
            Ok(Shape {
                label: label.to_string(),
                points: i.corners.corners().iter().map(|p| [p.x, p.y]).collect(),
                shape_type: polygon_type(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ann = Annotation {
        shapes,
        image_width: Some(sample.width()),
        image_height: Some(sample.height()),
    };
    let json = serde_json::to_string_pretty(&ann).expect("annotation serializes");
    std::fs::write(&inst, json).map_err(|e| Error::io(&inst, e))
}

/// Loads one sample. Each polygon becomes the rasterized convex hull of its points
/// restricted to pixels carrying its class in the semantic mask. A four-point polygon in
/// TL, TR, BR, BL order that forms a valid quad is taken as the corner annotation;
/// otherwise the corners are the extreme points of the mask. Polygons with fewer than three points, unknown labels or
/// no surviving pixels are skipped with a warning.
pub fn load_sample(root: &Path, id: &str, labels: &LabelSet) -> Result<LabeledSample> {
    let (img, sem, inst) = paths(root, id);
    for p in [&img, &sem, &inst] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let (w, h, rgb) = read_rgb_png(&img)?;
    let semantic = read_label_png(&sem)?;
    if (semantic.width, semantic.height) != (w, h) {
        return Err(Error::Format {
            path: sem,
            reason: format!("mask is {}x{}, image is {w}x{h}", semantic.width, semantic.height),
        });
    }
    let text = std::fs::read_to_string(&inst).map_err(|e| Error::io(&inst, e))?;
    let ann: Annotation = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: inst.clone(),
        reason: e.to_string(),
    })?;
    let mut instances = Vec::new();
    for (k, shape) in ann.shapes.iter().enumerate() {
        let Some(class) = labels.index_of(&shape.label) else {
            log::warn!("{}: shape {k} has unknown label {:?}; skipped", inst.display(), shape.label);
            continue;
        };
        if shape.points.len() < 3 {
            log::warn!("{}: shape {k} has {} points; skipped", inst.display(), shape.points.len());
            continue;
        }
        let pts: Vec<Point> = shape.points.iter().map(|&[x, y]| Point::new(x, y)).collect();
        let hull = convex_hull(&pts).map_err(|e| Error::Format {
            path: inst.clone(),
            reason: format!("shape {k}: {e}"),
        })?;
        let region = semantic.class_mask(class as u8);
        let mask = hull.rasterize(w, h).intersection(&region)?;
        if mask.is_empty() {
            log::warn!("{}: shape {k} covers no {} pixels; skipped", inst.display(), shape.label);
            continue;
        }
        let corners = match shape.points.as_slice() {
            &[tl, tr, br, bl] => {
                let q = Quad {
                    tl: Point::new(tl[0], tl[1]),
                    tr: Point::new(tr[0], tr[1]),
                    br: Point::new(br[0], br[1]),
                    bl: Point::new(bl[0], bl[1]),
                };
                if q.is_valid() && boxes_from_corners(&q).is_ok() {
                    q
                } else {
                    gbbox_corners_from_mask(&mask)?
                }
            }
            _ => gbbox_corners_from_mask(&mask)?,
        };
        instances.push(Instance { class, mask, corners });
    }
    LabeledSample::from_rgb(id.to_string(), &rgb, semantic, instances)
}

/// Reads `classes.txt` under `root`, falling back to the default facade classes.
pub fn read_label_set(root: &Path) -> Result<LabelSet> {
    let p = root.join("classes.txt");
    match std::fs::read_to_string(&p) {
        Ok(text) => {
            let set = LabelSet::from_classes_txt(&text);
            if set.len() < 2 {
                return Err(Error::Format {
                    path: p,
                    reason: "at least two classes are required".into(),
                });
            }
            Ok(set)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LabelSet::facade()),
        Err(e) => Err(Error::io(p, e)),
    }
}

/// Ids listed in a split file, one per line; blank lines are ignored.
pub fn split_ids(split_file: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(split_file).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(split_file.to_path_buf()),
        _ => Error::io(split_file, e),
    })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn load_dataset(root: &Path, split_file: &Path) -> Result<Vec<LabeledSample>> {
    let labels = read_label_set(root)?;
    split_ids(split_file)?
        .iter()
        .map(|id| load_sample(root, id, &labels))
        .collect()
}

/// Loads `splits/<name>.txt`.
pub fn load_split(root: &Path, name: &str) -> Result<Vec<LabeledSample>> {
    load_dataset(root, &root.join("splits").join(format!("{name}.txt")))
}

pub fn write_split(root: &Path, name: &str, ids: &[&str]) -> Result<()> {
    let dir = root.join("splits");
    create_dir(&dir)?;
    let p = dir.join(format!("{name}.txt"));
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Saves every sample plus `classes.txt` and an 80/20 train/test split by index.
pub fn write_dataset(root: &Path, samples: &[LabeledSample], labels: &LabelSet) -> Result<()> {
    create_dir(root)?;
    let classes = root.join("classes.txt");
    std::fs::write(&classes, labels.to_classes_txt()).map_err(|e| Error::io(&classes, e))?;
    for s in samples {
        save_sample(root, s, labels)?;
    }
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let n_train = samples.len() * 4 / 5;
    write_split(root, "train", &ids[..n_train])?;
    write_split(root, "test", &ids[n_train..])
}
