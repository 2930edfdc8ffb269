use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::CameraIntrinsics;
use crate::error::{Error, Result};

use super::{Box3D, Scene};

pub const SCHEMA: &str = "vbs-scene/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    cls: usize,
    x: f64,
    y: f64,
    z: f64,
    w: f64,
    l: f64,
    h: f64,
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    schema: String,
    id: String,
    seed: u64,
    intrinsics: CameraIntrinsics,
    cam_height: f64,
    boxes: Vec<BoxRecord>,
    ground: Vec<[f64; 2]>,
}

fn parse_error(path: &Path, e: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Pretty-printed JSON text of a scene; floats use shortest round-trip form.
pub fn scene_to_string(scene: &Scene) -> String {
    let file = SceneFile {
        schema: SCHEMA.to_string(),
        id: scene.id.clone(),
        seed: scene.seed,
        intrinsics: scene.intrinsics,
        cam_height: scene.cam_height,
        boxes: scene
            .boxes
            .iter()
            .map(|b| BoxRecord {
                cls: b.cls,
                x: b.x,
                y: b.y,
                z: b.z,
                w: b.w,
                l: b.l,
                h: b.h,
                yaw: b.yaw,
            })
            .collect(),
        ground: scene.ground.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("scene serializes");
    text.push('\n');
    text
}

/// Parses scene text; `path` only labels errors.
pub fn parse_scene(text: &str, path: &Path) -> Result<Scene> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(path, &e))?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(SCHEMA) => {}
        Some(other) => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: SCHEMA.to_string(),
                found: other.to_string(),
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                column: 1,
                message: "missing string field `schema`".to_string(),
            })
        }
    }
    let file: SceneFile = serde_json::from_str(text).map_err(|e| parse_error(path, &e))?;
    Ok(Scene {
        id: file.id,
        seed: file.seed,
        intrinsics: file.intrinsics,
        cam_height: file.cam_height,
        boxes: file
            .boxes
            .into_iter()
            .map(|b| Box3D {
                cls: b.cls,
                x: b.x,
                y: b.y,
                z: b.z,
                w: b.w,
                l: b.l,
                h: b.h,
                yaw: b.yaw,
            })
            .collect(),
        ground: file.ground,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, scene_to_string(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scenes, SceneSampler};

    #[test]
    fn text_round_trip_is_exact() {
        for scene in generate_scenes(11, 5, &SceneSampler::default()) {
            let text = scene_to_string(&scene);
            let back = parse_scene(&text, Path::new("mem")).unwrap();
            assert_eq!(back, scene);
            assert_eq!(scene_to_string(&back), text);
        }
    }

    #[test]
    fn truncated_text_reports_position() {
        let scene = &generate_scenes(1, 1, &SceneSampler::default())[0];
        let text = scene_to_string(scene);
        let cut = &text[..text.len() / 2];
        match parse_scene(cut, Path::new("cut.scene")) {
            Err(Error::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_is_version_error() {
        let scene = &generate_scenes(1, 1, &SceneSampler::default())[0];
        let text = scene_to_string(scene).replace(SCHEMA, "vbs-scene/2");
        assert!(matches!(parse_scene(&text, Path::new("v")), Err(Error::Version { .. })));
    }

    #[test]
    fn unknown_field_is_parse_error() {
        let scene = &generate_scenes(1, 1, &SceneSampler::default())[0];
        let text = scene_to_string(scene).replace("\"cam_height\"", "\"camera_height\"");
        assert!(matches!(parse_scene(&text, Path::new("f")), Err(Error::Parse { .. })));
    }
}
