//! JSON Lines corpus files plus the vocabulary, metadata and embedding sidecars.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::detector::ProposalSet;
use super::scene::{GenConfig, Scene, SceneObject};
use super::sentences::SentenceRecord;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::geometry::AxisAlignedBox;

pub const DATASET_VERSION: u64 = 1;

/// One scene with its sentences and simulated proposals: one line of the file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene: Scene,
    pub sentences: Vec<SentenceRecord>,
    pub proposals: ProposalSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalsLine {
    boxes: Vec<[f64; 6]>,
    class_logits: Vec<Vec<f64>>,
    objectness: Vec<f64>,
    appearance: Vec<Vec<f64>>,
    matched_gt: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    version: u64,
    scene_id: String,
    num_points: usize,
    objects: Vec<SceneObject>,
    sentences: Vec<SentenceRecord>,
    proposals: ProposalsLine,
}

impl From<&SceneRecord> for SceneLine {
    fn from(r: &SceneRecord) -> Self {
        let p = &r.proposals;
        SceneLine {
            version: DATASET_VERSION,
            scene_id: r.scene.scene_id.clone(),
            num_points: r.scene.num_points,
            objects: r.scene.objects.clone(),
            sentences: r.sentences.clone(),
            proposals: ProposalsLine {
                boxes: p.boxes.iter().map(AxisAlignedBox::to_array).collect(),
                class_logits: p.class_logits.clone(),
                objectness: p.objectness.clone(),
                appearance: p.appearance.clone(),
                matched_gt: p.matched_gt.clone(),
            },
        }
    }
}

impl TryFrom<SceneLine> for SceneRecord {
    type Error = Error;
    fn try_from(l: SceneLine) -> Result<Self> {
        let boxes = l
            .proposals
            .boxes
            .into_iter()
            .map(AxisAlignedBox::from_array)
            .collect::<Result<Vec<_>>>()?;
        let proposals = ProposalSet {
            boxes,
            class_logits: l.proposals.class_logits,
            objectness: l.proposals.objectness,
            appearance: l.proposals.appearance,
            matched_gt: l.proposals.matched_gt,
        };
        proposals.validate()?;
        let scene = Scene {
            scene_id: l.scene_id,
            objects: l.objects,
            num_points: l.num_points,
        };
        for s in &l.sentences {
            if scene.object(s.target_object_id).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "sentence targets object {} missing from scene {}",
                    s.target_object_id, scene.scene_id
                )));
            }
        }
        Ok(SceneRecord {
            scene,
            sentences: l.sentences,
            proposals,
        })
    }
}

pub fn write_dataset(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &SceneLine::from(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(DATASET_VERSION) => {}
            Some(found) => {
                return Err(Error::Version {
                    found,
                    expected: DATASET_VERSION,
                })
            }
            None => return Err(parse_err("missing or non-integer `version`".into())),
        }
        let parsed: SceneLine = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        out.push(SceneRecord::try_from(parsed).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

/// Word vectors in the `{"dim": .., "vectors": {word: [..]}}` file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Embeddings {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl Embeddings {
    pub fn get(&self, word: &str) -> Result<&[f64]> {
        self.vectors
            .get(word)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(word.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (w, v) in &self.vectors {
            if v.len() != self.dim {
                return Err(Error::Shape(format!("vector for `{w}` has {} dims, expected {}", v.len(), self.dim)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let e: Embeddings = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        e.validate()?;
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}

/// Paths of the files that make up one corpus.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub data: PathBuf,
    pub vocab: PathBuf,
    pub meta: PathBuf,
    pub embeddings: PathBuf,
}

impl CorpusPaths {
    /// `corpus.jsonl` -> `corpus.vocab.json`, `corpus.meta.json`, `corpus.embeddings.json`.
    pub fn for_data(data: &Path) -> Self {
        let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
        let sibling = |suffix: &str| data.with_file_name(format!("{stem}.{suffix}.json"));
        Self {
            data: data.to_path_buf(),
            vocab: sibling("vocab"),
            meta: sibling("meta"),
            embeddings: sibling("embeddings"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u64,
    generator: GenConfig,
}

/// A full corpus: scene records together with the vocabulary, generator
/// config (class and color names) and embedding table they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: GenConfig,
    pub vocab: Vocabulary,
    pub embeddings: Embeddings,
    pub records: Vec<SceneRecord>,
}

impl Corpus {
    pub fn num_sentences(&self) -> usize {
        self.records.iter().map(|r| r.sentences.len()).sum()
    }

    pub fn write(&self, data: &Path) -> Result<()> {
        let paths = CorpusPaths::for_data(data);
        write_dataset(&paths.data, &self.records)?;
        std::fs::write(&paths.vocab, serde_json::to_vec_pretty(&self.vocab.to_sidecar())?)?;
        let meta = Meta {
            version: DATASET_VERSION,
            generator: self.config.clone(),
        };
        std::fs::write(&paths.meta, serde_json::to_vec_pretty(&meta)?)?;
        self.embeddings.save(&paths.embeddings)
    }

    pub fn read(data: &Path) -> Result<Self> {
        let paths = CorpusPaths::for_data(data);
        let vocab_json: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(&paths.vocab)?))?;
        let vocab = Vocabulary::from_sidecar(&vocab_json)?;
        let meta: Meta = serde_json::from_reader(BufReader::new(File::open(&paths.meta)?))?;
        if meta.version != DATASET_VERSION {
            return Err(Error::Version {
                found: meta.version,
                expected: DATASET_VERSION,
            });
        }
        let embeddings = Embeddings::load(&paths.embeddings)?;
        let records = read_dataset(&paths.data)?;
        for r in &records {
            for s in &r.sentences {
                if let Some(&bad) = s.tokens.iter().find(|&&t| t >= vocab.len()) {
                    return Err(Error::OutOfRange(format!(
                        "token {bad} in scene {} exceeds vocabulary of {}",
                        r.scene.scene_id,
                        vocab.len()
                    )));
                }
            }
        }
        Ok(Self {
            config: meta.generator,
            vocab,
            embeddings,
            records,
        })
    }
}
