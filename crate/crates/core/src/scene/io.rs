use nalgebra::Quaternion;
use serde::{Deserialize, Serialize};

use super::{Scene, SceneError, SdfPrimitive, Shape};
use crate::geometry::{pose, Aabb, Rotation, Vec3};

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PrimitiveDoc {
    #[serde(flatten)]
    shape: Shape,
    /// Unit quaternion as `[w, x, y, z]`.
    rotation_wxyz: [f64; 4],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    version: u32,
    support_height: f64,
    target: usize,
    target_bbox_min: [f64; 3],
    target_bbox_max: [f64; 3],
    primitives: Vec<PrimitiveDoc>,
}

pub fn scene_to_json(scene: &Scene) -> String {
    let doc = SceneDoc {
        version: SCENE_FORMAT_VERSION,
        support_height: scene.support_height,
        target: scene.target,
        target_bbox_min: scene.target_bbox.min.into(),
        target_bbox_max: scene.target_bbox.max.into(),
        primitives: scene
            .primitives
            .iter()
            .map(|p| {
                let q = p.pose.rotation.quaternion();
                PrimitiveDoc {
                    shape: p.shape,
                    rotation_wxyz: [q.w, q.i, q.j, q.k],
                    translation: p.pose.translation.vector.into(),
                }
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("scene document serializes")
}

pub fn scene_from_json(text: &str) -> Result<Scene, SceneError> {
    let doc: SceneDoc = serde_json::from_str(text).map_err(|e| SceneError::Format(e.to_string()))?;
    if doc.version != SCENE_FORMAT_VERSION {
        return Err(SceneError::Format(format!(
            "unsupported version {} (expected {SCENE_FORMAT_VERSION})",
            doc.version
        )));
    }
    let mut primitives = Vec::with_capacity(doc.primitives.len());
    for p in doc.primitives {
        let [w, x, y, z] = p.rotation_wxyz;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() - 1.0).abs().lt(&1e-6) {
            return Err(SceneError::Format(format!("rotation is not a unit quaternion: {:?}", p.rotation_wxyz)));
        }
        let rot = Rotation::new_unchecked(q);
        primitives.push(SdfPrimitive::new(p.shape, pose(Vec3::from(p.translation), rot))?);
    }
    let mut scene = Scene::new(primitives, doc.support_height, doc.target)?;
    scene.target_bbox = Aabb::new(doc.target_bbox_min.into(), doc.target_bbox_max.into());
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_packed_scene, PackedConfig};

    #[test]
    fn round_trip_is_exact() {
        let scene = generate_packed_scene(3, 6, &PackedConfig::default()).unwrap();
        let text = scene_to_json(&scene);
        assert_eq!(scene_from_json(&text).unwrap(), scene);
    }

    #[test]
    fn rejects_wrong_version_and_garbage() {
        let scene = generate_packed_scene(3, 3, &PackedConfig::default()).unwrap();
        let text = scene_to_json(&scene).replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(scene_from_json(&text), Err(SceneError::Format(_))));
        assert!(scene_from_json("{not json").is_err());
    }
}
