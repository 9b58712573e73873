//! Template referring expressions of the form
//! `the <color> <class> <relation> the <anchor-color> <anchor-class>`.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{GenConfig, Scene, SceneObject};
use super::vocab::{tag_keywords, Pos, Vocabulary};
use crate::error::{Error, Result};

/// Spatial relations, all measured in scene coordinates (x to the right,
/// y away from the viewer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Left,
    Right,
    Front,
    Behind,
    Nearest,
    Farthest,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Left,
        Relation::Right,
        Relation::Front,
        Relation::Behind,
        Relation::Nearest,
        Relation::Farthest,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Relation::Left => "left-of",
            Relation::Right => "right-of",
            Relation::Front => "in-front-of",
            Relation::Behind => "behind",
            Relation::Nearest => "nearest-to",
            Relation::Farthest => "farthest-from",
        }
    }

    /// Whether `target` stands in this relation to `anchor` within `scene`.
    /// Nearest/farthest compare against every other object of the target's
    /// class and are false when the target's class is unique.
    pub fn holds(self, scene: &Scene, target: &SceneObject, anchor: &SceneObject, margin: f64) -> bool {
        if target.id == anchor.id {
            return false;
        }
        let (t, a) = (target.bbox.center(), anchor.bbox.center());
        match self {
            Relation::Left => t[0] < a[0] - margin,
            Relation::Right => t[0] > a[0] + margin,
            Relation::Front => t[1] < a[1] - margin,
            Relation::Behind => t[1] > a[1] + margin,
            Relation::Nearest | Relation::Farthest => {
                let d = target.bbox.distance(&anchor.bbox);
                let mut rivals = scene
                    .objects
                    .iter()
                    .filter(|o| o.id != target.id && o.id != anchor.id && o.class_id == target.class_id)
                    .peekable();
                if rivals.peek().is_none() {
                    return false;
                }
                rivals.all(|o| {
                    let od = o.bbox.distance(&anchor.bbox);
                    if self == Relation::Nearest {
                        d + margin < od
                    } else {
                        d > od + margin
                    }
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unique,
    Multiple,
}

impl Split {
    pub fn of(scene: &Scene, target_class: usize) -> Split {
        if scene.class_count(target_class) >= 2 {
            Split::Multiple
        } else {
            Split::Unique
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    #[serde(rename = "target")]
    pub target_object_id: usize,
    pub tokens: Vec<usize>,
    #[serde(rename = "keywords")]
    pub keyword_positions: Vec<usize>,
    #[serde(rename = "text_class")]
    pub text_class_id: usize,
    pub split: Split,
    pub relation: Relation,
    #[serde(rename = "anchor")]
    pub anchor_object_id: usize,
}

/// A sentence with some keywords replaced by the mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSentence {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
}

/// The template vocabulary implied by a generator config.
pub fn template_vocabulary(config: &GenConfig) -> Result<Vocabulary> {
    let mut words = vec![("the".to_string(), Pos::Func)];
    words.extend(config.colors.iter().map(|c| (c.clone(), Pos::Adj)));
    let mut seen = BTreeSet::new();
    for c in &config.classes {
        if !seen.insert(c.text_name.clone()) {
            return Err(Error::Config(format!("text class `{}` listed twice", c.text_name)));
        }
        words.push((c.text_name.clone(), Pos::Noun));
    }
    words.extend(Relation::ALL.iter().map(|r| (r.word().to_string(), Pos::Rel)));
    Vocabulary::new(words)
}

/// Does the description (color, class, relation, anchor) pick out only `target`?
fn identifies(scene: &Scene, target: &SceneObject, anchor: &SceneObject, rel: Relation, margin: f64) -> bool {
    scene
        .objects
        .iter()
        .filter(|o| o.id != target.id && o.class_id == target.class_id && o.color_id == target.color_id)
        .all(|o| !rel.holds(scene, o, anchor, margin))
}

fn anchor_is_unambiguous(scene: &Scene, anchor: &SceneObject) -> bool {
    scene
        .objects
        .iter()
        .filter(|o| o.class_id == anchor.class_id && o.color_id == anchor.color_id)
        .count()
        == 1
}

/// Generates at most one sentence per object, each true in the scene geometry
/// and unambiguous. Objects without a valid (relation, anchor) are skipped.
pub fn generate_sentences(scene: &Scene, config: &GenConfig, vocab: &Vocabulary, seed: u64) -> Result<Vec<SentenceRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_table: HashMap<usize, Pos> = vocab.pos_table();
    let keyword_pos: BTreeSet<Pos> = config.keyword_pos.iter().copied().collect();
    let the = vocab.id("the")?;

    let mut order: Vec<&SceneObject> = scene.objects.iter().collect();
    order.shuffle(&mut rng);

    let mut out = Vec::new();
    for target in order {
        if out.len() >= config.max_sentences_per_scene {
            break;
        }
        let mut options = Vec::new();
        for anchor in &scene.objects {
            if anchor.id == target.id || !anchor_is_unambiguous(scene, anchor) {
                continue;
            }
            for rel in Relation::ALL {
                if rel.holds(scene, target, anchor, config.relation_margin)
                    && identifies(scene, target, anchor, rel, config.relation_margin)
                {
                    options.push((rel, anchor));
                }
            }
        }
        let Some(&(rel, anchor)) = options.choose(&mut rng) else {
            continue;
        };
        let tokens = vec![
            the,
            vocab.id(&config.colors[target.color_id])?,
            vocab.id(&config.classes[target.class_id].text_name)?,
            vocab.id(rel.word())?,
            the,
            vocab.id(&config.colors[anchor.color_id])?,
            vocab.id(&config.classes[anchor.class_id].text_name)?,
        ];
        let keyword_positions = tag_keywords(&tokens, &pos_table, &keyword_pos)?;
        out.push(SentenceRecord {
            target_object_id: target.id,
            tokens,
            keyword_positions,
            text_class_id: target.class_id,
            split: Split::of(scene, target.class_id),
            relation: rel,
            anchor_object_id: anchor.id,
        });
    }
    Ok(out)
}

/// Masks `max(1, round(ratio * |keywords|))` keyword positions chosen uniformly.
pub fn mask_sentence(record: &SentenceRecord, ratio: f64, mask_id: usize, seed: u64) -> Result<MaskedSentence> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let keywords = &record.keyword_positions;
    if keywords.is_empty() {
        return Err(Error::Empty("keyword positions"));
    }
    let count = ((ratio * keywords.len() as f64).round() as usize).clamp(1, keywords.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = keywords.choose_multiple(&mut rng, count).copied().collect();
    positions.sort_unstable();
    let mut tokens = record.tokens.clone();
    for &p in &positions {
        if p >= tokens.len() {
            return Err(Error::OutOfRange(format!("keyword position {p} in sentence of {}", tokens.len())));
        }
        tokens[p] = mask_id;
    }
    Ok(MaskedSentence { tokens, positions })
}
