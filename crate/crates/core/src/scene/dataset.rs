use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decoder::BevGridSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{
    generate_scenes, load_scene, rasterize_bev, render_front_view, save_scene, visibility_mask,
    BevLabel, ClassPalette, Scene, SceneSampler,
};

const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# vbs-dataset/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// A directory holding `scenes/NNNN.scene` files and a manifest assigning
/// each scene id to a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<(Split, String)>,
}

impl Dataset {
    /// Writes `train + val` freshly generated scenes under `root`.
    pub fn generate(root: &Path, seed: u64, train: usize, val: usize, sampler: &SceneSampler) -> Result<Self> {
        let dir = root.join("scenes");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::with_capacity(train + val);
        let mut manifest = format!("{MANIFEST_HEADER}\n");
        for (i, scene) in generate_scenes(seed, train + val, sampler).iter().enumerate() {
            let split = if i < train { Split::Train } else { Split::Val };
            save_scene(scene, &dir.join(format!("{}.scene", scene.id)))?;
            manifest.push_str(&format!("{split} {}\n", scene.id));
            entries.push((split, scene.id.clone()));
        }
        let path = root.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::data(format!("cannot read dataset manifest {}: {e}", path.display())))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            Some((_, other)) => {
                return Err(Error::Version {
                    path,
                    expected: MANIFEST_HEADER.to_string(),
                    found: other.to_string(),
                })
            }
            None => return Err(Error::data(format!("empty manifest {}", path.display()))),
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let split = match parts.next() {
                Some("train") => Split::Train,
                Some("val") => Split::Val,
                _ => {
                    return Err(Error::Parse {
                        path,
                        line: n + 1,
                        column: 1,
                        message: format!("expected `train` or `val`, found {line:?}"),
                    })
                }
            };
            let id = parts.next().ok_or_else(|| Error::Parse {
                path: path.clone(),
                line: n + 1,
                column: 7,
                message: "missing scene id".to_string(),
            })?;
            entries.push((split, id.to_string()));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, id)| id.as_str())
            .collect()
    }

    pub fn scene_path(&self, id: &str) -> PathBuf {
        self.root.join("scenes").join(format!("{id}.scene"))
    }

    pub fn load(&self, split: Split, classes: usize) -> Result<Vec<Scene>> {
        self.ids(split)
            .into_iter()
            .map(|id| {
                let scene = load_scene(&self.scene_path(id))?;
                scene.validate(classes)?;
                Ok(scene)
            })
            .collect()
    }
}

/// A scene with its rendered input, labels and occlusion mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scene,
    /// Front-view render, channels in `[0, 1]`.
    pub image: Tensor,
    pub label: BevLabel,
    pub occluded: Tensor,
}

impl Sample {
    pub fn build(scene: Scene, palette: &ClassPalette, spec: &BevGridSpec, width: usize, height: usize) -> Self {
        let image = render_front_view(&scene, palette, width, height);
        let label = rasterize_bev(&scene, palette, spec);
        let occluded = visibility_mask(&scene, palette, spec);
        Sample {
            scene,
            image,
            label,
            occluded,
        }
    }

    /// Network input: the render mapped to `[−1, 1]`.
    pub fn input(&self) -> Tensor {
        let data = self.image.data().iter().map(|v| 2.0 * v - 1.0).collect();
        Tensor::from_parts(self.image.shape().to_vec(), data)
    }
}
