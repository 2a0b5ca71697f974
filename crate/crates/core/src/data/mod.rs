//! Labeled facade samples: the synthetic deformed-facade generator and the on-disk
//! dataset layout.
//!
//! A dataset root holds `images/<id>.png` (RGB), `semantic/<id>.png` (indexed, class id
//! per pixel, 255 for ignored pixels), `instances/<id>.json` (one polygon per instance in
//! the Labelme `shapes` convention), `splits/{train,test}.txt` (newline-separated ids)
//! and optionally `classes.txt` (one class name per line, background first).

mod io;
mod png_io;
mod synth;

pub use io::{
    load_dataset, load_sample, load_split, read_label_set, save_sample, split_ids, write_dataset,
    write_split,
};
pub use png_io::{
    encode_label_png, encode_rgb_png, read_label_png, read_rgb_png, write_gray_png, write_label_png,
    write_rgb_png,
};
pub use synth::{generate_dataset, generate_scene, GeneratedScene, SceneParams};

use crate::detect::GtBox;
use crate::error::{shape_err, Result};
use crate::geometry::{boxes_from_corners, LabelMap, PixelMask, Quad, IGNORE_LABEL};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Ordered class names; index 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub names: Vec<String>,
}

/// Names of classes whose instances are convex.
const CONVEX_NAMES: [&str; 3] = ["window", "door", "shop"];

impl LabelSet {
    /// background, facade, window, door, balcony, shop.
    pub fn facade() -> Self {
        Self::from_names(&["background", "facade", "window", "door", "balcony", "shop"])
    }

    /// background and window only.
    pub fn binary() -> Self {
        Self::from_names(&["background", "window"])
    }

    pub fn from_names(names: &[&str]) -> Self {
        LabelSet {
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    /// Indices of window, door and shop, whichever are present.
    pub fn convex_classes(&self) -> Vec<usize> {
        CONVEX_NAMES.iter().filter_map(|n| self.index_of(n)).collect()
    }

    /// 256-entry palette: fixed colours for known names, gray ramp otherwise, white for
    /// the ignore index.
    pub fn palette(&self) -> Vec<[u8; 3]> {
        let mut pal: Vec<[u8; 3]> = (0..=255u8).map(|i| [i, i, i]).collect();
        for (i, name) in self.names.iter().enumerate().take(255) {
            pal[i] = match name.as_str() {
                "background" => [0, 0, 0],
                "facade" => [200, 160, 110],
                "window" => [40, 90, 200],
                "door" => [150, 70, 30],
                "balcony" => [120, 200, 90],
                "shop" => [220, 60, 160],
                _ => {
                    let v = (40 + 37 * i % 200) as u8;
                    [v, 255 - v, v / 2]
                }
            };
        }
        pal[IGNORE_LABEL as usize] = [255, 255, 255];
        pal
    }

    pub fn to_classes_txt(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }

    pub fn from_classes_txt(text: &str) -> Self {
        LabelSet {
            names: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        }
    }
}

/// One annotated object instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub mask: PixelMask,
    /// Quadrilateral corner annotation.
    pub corners: Quad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    /// `[3,H,W]`, values in `[0,1]`, quantized to multiples of 1/255.
    pub image: Tensor,
    pub semantic: LabelMap,
    pub instances: Vec<Instance>,
}

impl LabeledSample {
    pub fn width(&self) -> usize {
        self.semantic.width
    }

    pub fn height(&self) -> usize {
        self.semantic.height
    }

    /// Builds a sample from interleaved 8-bit RGB.
    pub fn from_rgb(id: String, rgb: &[u8], semantic: LabelMap, instances: Vec<Instance>) -> Result<Self> {
        let (w, h) = (semantic.width, semantic.height);
        if rgb.len() != 3 * w * h {
            return Err(shape_err!("rgb buffer of {} bytes for a {w}x{h} image", rgb.len()));
        }
        let image = Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (w * h), i % (w * h));
            rgb[p * 3 + c] as f64 / 255.0
        });
        Ok(LabeledSample {
            id,
            image,
            semantic,
            instances,
        })
    }

    /// Interleaved 8-bit RGB of the image.
    pub fn rgb(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let d = self.image.data();
        let mut out = vec![0u8; 3 * w * h];
        for c in 0..3 {
            for p in 0..w * h {
                out[p * 3 + c] = (d[c * w * h + p] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    /// `(class, mask)` pairs for the convex regularizer.
    pub fn instance_masks(&self) -> Vec<(usize, &PixelMask)> {
        self.instances.iter().map(|i| (i.class, &i.mask)).collect()
    }

    /// Detection targets for instances of `classes` whose corners form a consistent
    /// two-rectangle encoding.
    pub fn gt_boxes(&self, classes: &[usize]) -> Vec<GtBox> {
        self.instances
            .iter()
            .filter(|i| classes.contains(&i.class) && i.corners.is_valid())
            .filter_map(|i| {
                let (tlbr, trbl) = boxes_from_corners(&i.corners).ok()?;
                Some(GtBox {
                    tlbr,
                    trbl,
                    class: i.class,
                })
            })
            .collect()
    }
}
