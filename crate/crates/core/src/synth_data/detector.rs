//! Box-level stand-in for a pretrained 3D detector: jittered copies of the
//! annotated boxes, noisy class logits, appearance features and random
//! low-confidence distractors.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{GenConfig, Scene};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, geometric_attributes, AxisAlignedBox};

pub const GEOMETRIC_DIM: usize = 27;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSimConfig {
    /// Number of proposals per scene (`M_p`).
    pub num_proposals: usize,
    pub proposals_per_object: usize,
    pub min_distractors: usize,
    /// Standard deviation of the center jitter, as a fraction of the object's
    /// extent along each axis.
    pub center_noise: f64,
    /// Standard deviation of the multiplicative size jitter.
    pub size_noise: f64,
    /// Probability that a proposal's class logits peak at a wrong class.
    pub label_noise: f64,
    pub logit_peak: f64,
    pub logit_noise: f64,
    pub appearance_dim: usize,
    pub appearance_noise: f64,
}

impl Default for DetectorSimConfig {
    fn default() -> Self {
        Self {
            num_proposals: 32,
            proposals_per_object: 2,
            min_distractors: 4,
            center_noise: 0.05,
            size_noise: 0.05,
            label_noise: 0.1,
            logit_peak: 4.0,
            logit_noise: 0.5,
            appearance_dim: 16,
            appearance_noise: 0.3,
        }
    }
}

impl DetectorSimConfig {
    pub fn validate(&self, gen: &GenConfig) -> Result<()> {
        if self.center_noise < 0.0 || self.size_noise < 0.0 {
            return Err(Error::Config("detector noise levels must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1)".into()));
        }
        if self.appearance_dim < gen.colors.len() + gen.classes.len() {
            return Err(Error::Config(format!(
                "appearance_dim {} cannot encode {} colors and {} classes",
                self.appearance_dim,
                gen.colors.len(),
                gen.classes.len()
            )));
        }
        if self.proposals_per_object == 0 || self.num_proposals == 0 {
            return Err(Error::Config("proposal counts must be positive".into()));
        }
        Ok(())
    }

    pub fn attribute_dim(&self) -> usize {
        GEOMETRIC_DIM + self.appearance_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub boxes: Vec<AxisAlignedBox>,
    pub class_logits: Vec<Vec<f64>>,
    pub objectness: Vec<f64>,
    pub appearance: Vec<Vec<f64>>,
    /// Id of the annotated object a proposal overlaps with IoU >= 0.5. Only
    /// for diagnostics; no training loss reads it.
    pub matched_gt: Vec<Option<usize>>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `M_p x (27 + A)`: center and corners followed by the appearance vector.
    pub fn attributes(&self) -> Array2<f64> {
        let a = self.appearance.first().map_or(0, Vec::len);
        let mut out = Array2::zeros((self.len(), GEOMETRIC_DIM + a));
        for (i, (b, app)) in self.boxes.iter().zip(&self.appearance).enumerate() {
            let geo = geometric_attributes(b);
            for (j, v) in geo.iter().chain(app.iter()).enumerate() {
                out[[i, j]] = *v;
            }
        }
        out
    }

    pub fn class_logit_matrix(&self) -> Array2<f64> {
        let c = self.class_logits.first().map_or(0, Vec::len);
        Array2::from_shape_fn((self.len(), c), |(i, j)| self.class_logits[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if self.class_logits.len() != n || self.objectness.len() != n || self.appearance.len() != n || self.matched_gt.len() != n {
            return Err(Error::Shape("proposal fields have different lengths".into()));
        }
        let widths = |rows: &Vec<Vec<f64>>| rows.iter().map(Vec::len).collect::<std::collections::BTreeSet<_>>().len() <= 1;
        if !widths(&self.class_logits) || !widths(&self.appearance) {
            return Err(Error::Shape("ragged proposal feature rows".into()));
        }
        Ok(())
    }
}

/// Best-overlap annotated object for each box, kept when IoU >= 0.5.
pub fn match_to_ground_truth(boxes: &[AxisAlignedBox], scene: &Scene) -> Vec<Option<usize>> {
    boxes
        .iter()
        .map(|b| {
            scene
                .objects
                .iter()
                .map(|o| (o.id, box_iou(b, &o.bbox)))
                .filter(|(_, iou)| *iou >= 0.5)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(id, _)| id)
        })
        .collect()
}

pub fn simulate_proposals(scene: &Scene, gen: &GenConfig, config: &DetectorSimConfig, seed: u64) -> Result<ProposalSet> {
    config.validate(gen)?;
    let m = config.num_proposals;
    let n_obj = scene.objects.len();
    if m < n_obj {
        return Err(Error::InvalidArgument(format!("{m} proposals cannot cover {n_obj} objects")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n_classes = gen.classes.len();
    let n_colors = gen.colors.len();

    // Budget: one proposal per object first, then extra copies round-robin,
    // leaving room for the requested distractors where possible.
    let object_budget = (n_obj * config.proposals_per_object)
        .min(m.saturating_sub(config.min_distractors))
        .max(n_obj);
    let mut sources: Vec<usize> = Vec::with_capacity(object_budget);
    'fill: for _round in 0..config.proposals_per_object {
        for idx in 0..n_obj {
            if sources.len() == object_budget {
                break 'fill;
            }
            sources.push(idx);
        }
    }

    let mut boxes = Vec::with_capacity(m);
    let mut logits = Vec::with_capacity(m);
    let mut objectness = Vec::with_capacity(m);
    let mut appearance = Vec::with_capacity(m);

    for &idx in &sources {
        let obj = &scene.objects[idx];
        let (c, s) = (obj.bbox.center(), obj.bbox.size());
        let center: [f64; 3] = std::array::from_fn(|i| c[i] + config.center_noise * s[i] * unit.sample(&mut rng));
        let size: [f64; 3] = std::array::from_fn(|i| (s[i] * (1.0 + config.size_noise * unit.sample(&mut rng))).max(0.05 * s[i]));
        let bbox = AxisAlignedBox::new(center, size)?;

        let label = if rng.random_bool(config.label_noise) {
            let other = rng.random_range(0..n_classes - 1);
            if other >= obj.class_id {
                other + 1
            } else {
                other
            }
        } else {
            obj.class_id
        };
        let mut row: Vec<f64> = (0..n_classes).map(|_| config.logit_noise * unit.sample(&mut rng)).collect();
        row[label] += config.logit_peak;
        logits.push(row);

        let iou = box_iou(&bbox, &obj.bbox);
        objectness.push((0.5 + 0.5 * iou + 0.05 * unit.sample(&mut rng)).clamp(0.0, 1.0));

        let mut app: Vec<f64> = (0..config.appearance_dim)
            .map(|_| config.appearance_noise * unit.sample(&mut rng))
            .collect();
        app[obj.color_id] += 1.0;
        app[n_colors + obj.class_id] += 1.0;
        appearance.push(app);
        boxes.push(bbox);
    }

    let [w, d] = gen.room_size;
    while boxes.len() < m {
        let size = [
            rng.random_range(0.3..1.5),
            rng.random_range(0.3..1.5),
            rng.random_range(0.3..1.5),
        ];
        let center = [
            rng.random_range(-0.5 * w..0.5 * w),
            rng.random_range(-0.5 * d..0.5 * d),
            0.5 * size[2],
        ];
        boxes.push(AxisAlignedBox::new(center, size)?);
        let mut row: Vec<f64> = (0..n_classes).map(|_| config.logit_noise * unit.sample(&mut rng)).collect();
        row[rng.random_range(0..n_classes)] += 0.25 * config.logit_peak;
        logits.push(row);
        objectness.push(rng.random_range(0.0..0.3));
        let mut app: Vec<f64> = (0..config.appearance_dim)
            .map(|_| config.appearance_noise * unit.sample(&mut rng))
            .collect();
        app[rng.random_range(0..n_colors)] += 0.5;
        app[n_colors + rng.random_range(0..n_classes)] += 0.5;
        appearance.push(app);
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let boxes: Vec<AxisAlignedBox> = order.iter().map(|&i| boxes[i]).collect();
    let matched_gt = match_to_ground_truth(&boxes, scene);
    Ok(ProposalSet {
        class_logits: order.iter().map(|&i| logits[i].clone()).collect(),
        objectness: order.iter().map(|&i| objectness[i]).collect(),
        appearance: order.iter().map(|&i| appearance[i].clone()).collect(),
        boxes,
        matched_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::grounding_upper_bound;
    use crate::synth_data::scene::generate_scene;

    fn exact() -> DetectorSimConfig {
        DetectorSimConfig {
            center_noise: 0.0,
            size_noise: 0.0,
            label_noise: 0.0,
            min_distractors: 0,
            ..DetectorSimConfig::default()
        }
    }

    #[test]
    fn exact_proposals_reach_every_object() {
        let gen = GenConfig::default();
        let det = DetectorSimConfig {
            proposals_per_object: 1,
            num_proposals: 12,
            ..exact()
        };
        for seed in 0..10 {
            let scene = generate_scene(&gen, "s", seed).unwrap();
            let props = simulate_proposals(&scene, &gen, &det, seed).unwrap();
            assert_eq!(props.len(), 12);
            for o in &scene.objects {
                assert_eq!(grounding_upper_bound(&props.boxes, &o.bbox).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn fixed_size_and_determinism() {
        let gen = GenConfig::default();
        let det = DetectorSimConfig::default();
        let scene = generate_scene(&gen, "s", 4).unwrap();
        let a = simulate_proposals(&scene, &gen, &det, 9).unwrap();
        let b = simulate_proposals(&scene, &gen, &det, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), det.num_proposals);
        a.validate().unwrap();
        let attrs = a.attributes();
        assert_eq!(attrs.dim(), (32, 43));
        for (i, b) in a.boxes.iter().enumerate() {
            let geo = geometric_attributes(b);
            for j in 0..27 {
                assert_eq!(attrs[[i, j]], geo[j]);
            }
        }
    }

    #[test]
    fn matched_gt_definition() {
        let gen = GenConfig::default();
        let det = DetectorSimConfig {
            center_noise: 0.15,
            ..DetectorSimConfig::default()
        };
        let scene = generate_scene(&gen, "s", 2).unwrap();
        let props = simulate_proposals(&scene, &gen, &det, 5).unwrap();
        for (b, m) in props.boxes.iter().zip(&props.matched_gt) {
            let best = scene.objects.iter().map(|o| box_iou(b, &o.bbox)).fold(0.0, f64::max);
            assert_eq!(m.is_some(), best >= 0.5);
            if let Some(id) = m {
                assert!(box_iou(b, &scene.object(*id).unwrap().bbox) >= 0.5);
            }
        }
    }

    #[test]
    fn too_few_proposals_is_an_error() {
        let gen = GenConfig {
            object_count: [6, 6],
            ..GenConfig::default()
        };
        let det = DetectorSimConfig {
            num_proposals: 5,
            ..DetectorSimConfig::default()
        };
        let scene = generate_scene(&gen, "s", 1).unwrap();
        assert!(simulate_proposals(&scene, &gen, &det, 1).is_err());
    }
}
