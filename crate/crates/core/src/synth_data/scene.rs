//! Synthetic indoor scenes: labelled axis-aligned furniture boxes on a floor.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detector::DetectorSimConfig;
use super::vocab::{default_keyword_pos, Pos};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, AxisAlignedBox};

/// One furniture category: the detector's name for it, the word sentences use
/// for it, and its nominal extent in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub object_name: String,
    pub text_name: String,
    pub size: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub classes: Vec<ClassSpec>,
    pub colors: Vec<String>,
    /// Floor extent along x and y; the room is centred on the origin.
    pub room_size: [f64; 2],
    /// Inclusive range of objects per scene.
    pub object_count: [usize; 2],
    /// Relative uniform jitter applied to each nominal class size.
    pub size_jitter: f64,
    pub max_overlap_iou: f64,
    pub max_sentences_per_scene: usize,
    /// Minimum coordinate gap for directional relations to count as true.
    pub relation_margin: f64,
    pub keyword_pos: Vec<Pos>,
    /// Informational only; no points are synthesized.
    pub points_per_scene: usize,
    pub embedding_dim: usize,
    pub detector: DetectorSimConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        let class = |o: &str, t: &str, size: [f64; 3]| ClassSpec {
            object_name: o.into(),
            text_name: t.into(),
            size,
        };
        Self {
            classes: vec![
                class("seat", "chair", [0.55, 0.55, 0.9]),
                class("desk", "table", [1.3, 0.8, 0.75]),
                class("couch", "sofa", [1.9, 0.9, 0.8]),
                class("cabinet", "cabinet", [0.8, 0.5, 1.2]),
                class("bed", "bed", [2.0, 1.5, 0.6]),
                class("bookcase", "shelf", [1.0, 0.4, 1.8]),
            ],
            colors: ["red", "blue", "green", "yellow", "black", "white"]
                .map(String::from)
                .to_vec(),
            room_size: [7.0, 7.0],
            object_count: [6, 12],
            size_jitter: 0.15,
            max_overlap_iou: 0.05,
            max_sentences_per_scene: 12,
            relation_margin: 0.3,
            // Relations count as keywords here: sentences name the target by color,
            // class and its relation to the anchor.
            keyword_pos: default_keyword_pos().into_iter().chain([Pos::Rel]).collect(),
            points_per_scene: 50_000,
            embedding_dim: 32,
            detector: DetectorSimConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 4 {
            return Err(Error::Config("need at least 4 object classes".into()));
        }
        if self.colors.len() < 3 {
            return Err(Error::Config("need at least 3 colors".into()));
        }
        let [lo, hi] = self.object_count;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!("object_count range {lo}..={hi} invalid")));
        }
        if self.room_size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("room_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(Error::Config("size_jitter must lie in [0, 1)".into()));
        }
        for c in &self.classes {
            if c.size.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Config(format!("class `{}` has a non-positive size", c.object_name)));
            }
        }
        self.detector.validate(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(flatten)]
    pub bbox: AxisAlignedBox,
    #[serde(rename = "color")]
    pub color_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub objects: Vec<SceneObject>,
    pub num_points: usize,
}

impl Scene {
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn class_count(&self, class_id: usize) -> usize {
        self.objects.iter().filter(|o| o.class_id == class_id).count()
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_ATTEMPTS: usize = 50;

/// Samples a non-overlapping layout. Deterministic in `(config, seed)`.
pub fn generate_scene(config: &GenConfig, scene_id: impl Into<String>, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = config.object_count;
    let count = rng.random_range(lo..=hi);
    let class_ids: Vec<usize> = (0..config.classes.len()).collect();

    'layout: for _ in 0..LAYOUT_ATTEMPTS {
        let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
        for id in 0..count {
            let class_id = *class_ids.choose(&mut rng).expect("non-empty classes");
            let color_id = rng.random_range(0..config.colors.len());
            let nominal = config.classes[class_id].size;
            let mut size: [f64; 3] = std::array::from_fn(|i| {
                nominal[i] * (1.0 + config.size_jitter * rng.random_range(-1.0..=1.0))
            });
            if rng.random_bool(0.5) {
                size.swap(0, 1);
            }
            let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                let half = [
                    0.5 * (config.room_size[0] - size[0]),
                    0.5 * (config.room_size[1] - size[1]),
                ];
                if half[0] < 0.0 || half[1] < 0.0 {
                    return None;
                }
                let center = [
                    rng.random_range(-half[0]..=half[0]),
                    rng.random_range(-half[1]..=half[1]),
                    0.5 * size[2],
                ];
                let bbox = AxisAlignedBox::new(center, size).ok()?;
                objects
                    .iter()
                    .all(|o| box_iou(&o.bbox, &bbox) <= config.max_overlap_iou)
                    .then_some(bbox)
            });
            match placed {
                Some(bbox) => objects.push(SceneObject {
                    id,
                    class_id,
                    bbox,
                    color_id,
                }),
                None => continue 'layout,
            }
        }
        return Ok(Scene {
            scene_id: scene_id.into(),
            objects,
            num_points: config.points_per_scene,
        });
    }
    Err(Error::Generation(format!(
        "could not place {count} objects in a {:?} room",
        config.room_size
    )))
}
