//! Synthetic driving scenes: generation, front-view rendering, BEV label
//! rasterization and serialization.

mod dataset;
mod generate;
mod io;
mod raster;
mod render;

use std::f64::consts::PI;

use crate::decoder::CameraIntrinsics;
use crate::error::{Error, Result};

pub use dataset::{Dataset, Sample, Split};
pub use generate::{generate_scene, generate_scenes, SceneSampler};
pub use io::{load_scene, parse_scene, save_scene, scene_to_string, SCHEMA};
pub use raster::{point_in_polygon, rasterize_bev, visibility_mask, BevLabel};
pub use render::{render_front_view, Rgb, GROUND_COLOR, SKY_COLOR};

pub const DESK_CAMERA_HEIGHT: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeRange {
    pub width: (f64, f64),
    pub length: (f64, f64),
    pub height: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub name: &'static str,
    /// Heading of the matching column in the metrics report.
    pub column: &'static str,
    pub color: Rgb,
    /// Background surface drawn from the ground polygon rather than boxes.
    pub surface: bool,
    /// Flat objects are too low to hide anything behind them.
    pub flat: bool,
    pub dynamic: bool,
    /// Relative frequency among sampled boxes.
    pub rate: f64,
    pub size: SizeRange,
}

/// Ordered set of classes; the index is the class id and the mask channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPalette {
    classes: Vec<ClassInfo>,
}

const NO_SIZE: SizeRange = SizeRange {
    width: (0.0, 0.0),
    length: (0.0, 0.0),
    height: (0.0, 0.0),
};

impl Default for ClassPalette {
    /// drivable, walkway, car, truck, pedestrian, barrier.
    fn default() -> Self {
        let class = |name, column, color, rate, size, dynamic, flat| ClassInfo {
            name,
            column,
            color,
            surface: false,
            flat,
            dynamic,
            rate,
            size,
        };
        ClassPalette {
            classes: vec![
                ClassInfo {
                    surface: true,
                    flat: true,
                    ..class("drivable", "Drivable", [128, 64, 128], 0.0, NO_SIZE, false, true)
                },
                class(
                    "walkway",
                    "WW",
                    [244, 200, 60],
                    0.15,
                    SizeRange { width: (1.5, 3.0), length: (8.0, 20.0), height: (0.15, 0.15) },
                    false,
                    true,
                ),
                class(
                    "car",
                    "Car",
                    [0, 0, 230],
                    0.40,
                    SizeRange { width: (1.7, 2.0), length: (3.8, 4.8), height: (1.4, 1.6) },
                    true,
                    false,
                ),
                class(
                    "truck",
                    "Truck",
                    [0, 160, 160],
                    0.10,
                    SizeRange { width: (2.3, 2.6), length: (6.0, 10.0), height: (2.8, 3.6) },
                    true,
                    false,
                ),
                class(
                    "pedestrian",
                    "Ped",
                    [230, 30, 30],
                    0.20,
                    SizeRange { width: (0.5, 0.7), length: (0.5, 0.7), height: (1.6, 1.9) },
                    true,
                    false,
                ),
                class(
                    "barrier",
                    "TB",
                    [255, 140, 0],
                    0.15,
                    SizeRange { width: (0.4, 0.6), length: (2.0, 4.0), height: (0.8, 1.1) },
                    false,
                    false,
                ),
            ],
        }
    }
}

impl ClassPalette {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::config("class palette is empty"));
        }
        if classes.iter().filter(|c| c.surface).count() != 1 {
            return Err(Error::config("palette needs exactly one ground-surface class"));
        }
        if !classes.iter().any(|c| !c.surface && c.rate > 0.0) {
            return Err(Error::config("palette has no box class with positive rate"));
        }
        Ok(ClassPalette { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: usize) -> &ClassInfo {
        &self.classes[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassInfo> {
        self.classes.iter()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.classes.iter().map(|c| c.name).collect()
    }

    pub fn columns(&self) -> Vec<&'static str> {
        self.classes.iter().map(|c| c.column).collect()
    }

    pub fn surface_class(&self) -> usize {
        self.classes.iter().position(|c| c.surface).unwrap_or(0)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Classes that also appear in the Cityscapes label set.
    pub fn subset(&self) -> Vec<usize> {
        const STARRED: [&str; 7] = ["Drivable", "WW", "Car", "Bus", "Ped", "2W", "Cycle"];
        (0..self.len())
            .filter(|&i| STARRED.contains(&self.classes[i].column))
            .collect()
    }

    pub fn dynamic(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.classes[i].dynamic).collect()
    }

    /// Sampling probability of each box class (zero for the surface class).
    pub fn box_rates(&self) -> Vec<f64> {
        let total: f64 = self.classes.iter().filter(|c| !c.surface).map(|c| c.rate).sum();
        self.classes
            .iter()
            .map(|c| if c.surface { 0.0 } else { c.rate / total })
            .collect()
    }
}

/// Oriented box resting on the ground. Camera frame: `x` lateral (right),
/// `y` vertical (down), `z` forward. At zero yaw the width runs along `x`
/// and the length along `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub cls: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    /// Box of class `cls` standing on ground `cam_height` below the camera.
    pub fn on_ground(cls: usize, x: f64, z: f64, (w, l, h): (f64, f64, f64), yaw: f64, cam_height: f64) -> Self {
        Box3D {
            cls,
            x,
            y: cam_height - h / 2.0,
            z,
            w,
            l,
            h,
            yaw,
        }
    }

    /// Box-local `(across, along)` coordinates of ground point `(px, pz)`.
    pub fn to_local(&self, px: f64, pz: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dz) = (px - self.x, pz - self.z);
        (dx * c - dz * s, dx * s + dz * c)
    }

    pub fn contains_ground_point(&self, px: f64, pz: f64) -> bool {
        let (a, b) = self.to_local(px, pz);
        a.abs() <= self.w / 2.0 && b.abs() <= self.l / 2.0
    }

    /// Footprint corners `(x, z)`, walking the local rectangle edge by edge.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hw, hl) = (self.w / 2.0, self.l / 2.0);
        [(-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl)].map(|(a, b)| (self.x + a * c + b * s, self.z - a * s + b * c))
    }

    /// The eight corners `(x, y, z)`: footprint at the bottom face, then top.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.footprint();
        let bottom = self.y + self.h / 2.0;
        let top = self.y - self.h / 2.0;
        let mut out = [[0.0; 3]; 8];
        for (i, (x, z)) in fp.iter().enumerate() {
            out[i] = [*x, bottom, *z];
            out[i + 4] = [*x, top, *z];
        }
        out
    }

    pub fn bounding_radius(&self) -> f64 {
        self.w.hypot(self.l) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub cam_height: f64,
    pub boxes: Vec<Box3D>,
    /// Drivable-surface polygon on the ground plane, `(x, z)` vertices.
    pub ground: Vec<[f64; 2]>,
}

impl Scene {
    pub fn validate(&self, classes: usize) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.cam_height > 0.0 && self.cam_height.is_finite()) {
            return Err(Error::data(format!("scene {}: camera height must be positive", self.id)));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let vals = [b.x, b.y, b.z, b.w, b.l, b.h, b.yaw];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("scene {}: box {i} has a non-finite field", self.id)));
            }
            if b.cls >= classes {
                return Err(Error::data(format!(
                    "scene {}: box {i} class {} outside [0, {classes})",
                    self.id, b.cls
                )));
            }
            if !(b.w > 0.0 && b.l > 0.0 && b.h > 0.0) {
                return Err(Error::data(format!("scene {}: box {i} has non-positive size", self.id)));
            }
            if (b.y + b.h / 2.0 - self.cam_height).abs() > 1e-9 {
                return Err(Error::data(format!("scene {}: box {i} does not rest on the ground", self.id)));
            }
            if b.z <= 0.0 {
                return Err(Error::data(format!("scene {}: box {i} is behind the camera", self.id)));
            }
            if b.yaw.abs() > PI + 1e-12 {
                return Err(Error::data(format!("scene {}: box {i} yaw outside [-pi, pi]", self.id)));
            }
        }
        if self.ground.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("scene {}: non-finite ground vertex", self.id)));
        }
        if !self.ground.is_empty() && self.ground.len() < 3 {
            return Err(Error::data(format!("scene {}: ground polygon needs 3 vertices", self.id)));
        }
        Ok(())
    }
}
