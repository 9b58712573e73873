use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{build_class_transform, AttributeEncoder, ClassTransform, SentenceEncoder, TextClassifier, VocabEmbedding};
use crate::error::{Error, Result};
use crate::fine::ReconstructionDecoder;
use crate::distill::MatchingHead;
use crate::params::ParamStore;
use crate::synth_data::{Corpus, Embeddings, SceneRecord, GEOMETRIC_DIM};
use crate::tape::{Tape, Var};

use super::config::TrainConfig;

/// All trainable modules of one run plus the fixed class transform.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub words: Vec<String>,
    pub mask_id: usize,
    pub attribute_dim: usize,
    pub class_transform: ClassTransform,
    pub(crate) attributes: AttributeEncoder,
    pub(crate) sentences: SentenceEncoder,
    pub(crate) classifier: TextClassifier,
    pub(crate) decoder: ReconstructionDecoder,
    /// The distilled grounding model: its own object and sentence encoders
    /// under the matching head, trained by the distillation loss alone.
    pub(crate) student_attributes: AttributeEncoder,
    pub(crate) student_sentences: SentenceEncoder,
    pub(crate) head: MatchingHead,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`. Word vectors from
    /// `embeddings` seed the token table when the config asks for it.
    pub fn new(
        config: &TrainConfig,
        words: Vec<String>,
        mask_id: usize,
        attribute_dim: usize,
        embedding_dim: usize,
        class_transform: ClassTransform,
        embeddings: Option<&Embeddings>,
    ) -> Result<Self> {
        config.validate()?;
        if mask_id >= words.len() {
            return Err(Error::Config(format!("mask id {mask_id} outside a vocabulary of {}", words.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let word_refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let init = if config.init_word_embeddings { embeddings } else { None };
        let embedding = VocabEmbedding::new(&mut store, "embedding", &word_refs, embedding_dim, init, &mut rng)?;
        let attributes = AttributeEncoder::new(
            &mut store,
            "attr",
            attribute_dim,
            d,
            config.attribute_layers,
            config.attention_heads,
            &mut rng,
        );
        let sentences = SentenceEncoder::new(&mut store, "sentence", embedding, d, config.sentence_pooling, &mut rng);
        let classifier = TextClassifier::new(&mut store, d, class_transform.text_names.len(), &mut rng);
        let decoder = ReconstructionDecoder::new(
            &mut store,
            d,
            words.len(),
            config.decoder_layers,
            config.decoder_heads,
            config.next_token_recon,
            &mut rng,
        );
        let student_embedding =
            VocabEmbedding::new(&mut store, "student.embedding", &word_refs, embedding_dim, init, &mut rng)?;
        let student_attributes = AttributeEncoder::new(
            &mut store,
            "student.attr",
            attribute_dim,
            d,
            config.attribute_layers,
            config.attention_heads,
            &mut rng,
        );
        let student_sentences = SentenceEncoder::new(
            &mut store,
            "student.sentence",
            student_embedding,
            d,
            config.sentence_pooling,
            &mut rng,
        );
        let head = MatchingHead::new(&mut store, d, config.head_heads, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            mask_id,
            words,
            attribute_dim,
            class_transform,
            attributes,
            sentences,
            classifier,
            decoder,
            student_attributes,
            student_sentences,
            head,
        })
    }

    /// Sizes the model for a corpus and builds its class transform.
    pub fn for_corpus(config: &TrainConfig, corpus: &Corpus) -> Result<Self> {
        if corpus.config.detector.num_proposals != config.num_proposals {
            return Err(Error::Config(format!(
                "corpus has {} proposals per scene, config expects {}",
                corpus.config.detector.num_proposals, config.num_proposals
            )));
        }
        let object_names: Vec<String> = corpus.config.classes.iter().map(|c| c.object_name.clone()).collect();
        let mut text_names: Vec<String> = Vec::new();
        for c in &corpus.config.classes {
            if !text_names.contains(&c.text_name) {
                text_names.push(c.text_name.clone());
            }
        }
        let transform = build_class_transform(&object_names, &text_names, &corpus.embeddings)?;
        Self::new(
            config,
            corpus.vocab.words().map(str::to_string).collect(),
            corpus.vocab.mask_id(),
            corpus.config.detector.attribute_dim(),
            corpus.embeddings.dim,
            transform,
            Some(&corpus.embeddings),
        )
    }

    /// Errors unless the corpus uses this model's vocabulary, classes and proposal layout.
    pub fn check_compatible(&self, corpus: &Corpus) -> Result<()> {
        let words: Vec<&str> = corpus.vocab.words().collect();
        if words != self.words.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Config("corpus vocabulary differs from the model's".into()));
        }
        let objects: Vec<&String> = corpus.config.classes.iter().map(|c| &c.object_name).collect();
        if objects != self.class_transform.object_names.iter().collect::<Vec<_>>() {
            return Err(Error::Config("corpus object classes differ from the model's".into()));
        }
        if corpus.config.detector.num_proposals != self.config.num_proposals
            || corpus.config.detector.attribute_dim() != self.attribute_dim
        {
            return Err(Error::Config("corpus proposal layout differs from the model's".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.sentences.embedding.dim
    }

    pub fn num_text_classes(&self) -> usize {
        self.class_transform.text_names.len()
    }

    /// `P̃` for the stacked proposals of `records`: `(B*M_p) x d`.
    pub fn encode_objects(&self, tape: &mut Tape, records: &[&SceneRecord]) -> Result<Var> {
        let m = self.config.num_proposals;
        let x = tape.constant(stacked_attributes(records, m, self.config.geometry_scale)?);
        self.attributes.encode(tape, &self.store, x, m)
    }

    pub fn encode_sentences(&self, tape: &mut Tape, batch: &[&[usize]]) -> Result<crate::encoders::SentenceEncoding> {
        self.sentences.encode(tape, &self.store, batch)
    }

    pub fn classify(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        self.classifier.classify(tape, &self.store, pooled)
    }

    /// Matching-head scores `B x M_p` for `B` queries; query `b` has tokens
    /// `tokens[b]` and describes scene `query_scene[b]` of `records`. All
    /// features come from the student encoders.
    pub fn head_scores(
        &self,
        tape: &mut Tape,
        records: &[&SceneRecord],
        query_scene: &[usize],
        tokens: &[&[usize]],
    ) -> Result<Var> {
        let m = self.config.num_proposals;
        let attrs = stacked_attributes(records, m, self.config.geometry_scale)?;
        let x = tape.constant(attrs);
        let objects = self.student_attributes.encode(tape, &self.store, x, m)?;
        let enc = self.student_sentences.encode(tape, &self.store, tokens)?;
        let tiled = tape.gather_rows(objects, &self.tile_rows(query_scene))?;
        self.head.matching_scores(tape, &self.store, tiled, enc.states, m, enc.length)
    }

    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        tokens: Var,
        candidates: Var,
        length: usize,
    ) -> Result<crate::fine::ReconstructionOutput> {
        self.decoder.reconstruct(tape, &self.store, tokens, candidates, length)
    }

    /// Row indices selecting each query's scene block of stacked proposals.
    pub(crate) fn tile_rows(&self, query_scene: &[usize]) -> Vec<usize> {
        let m = self.config.num_proposals;
        query_scene.iter().flat_map(|&s| s * m..(s + 1) * m).collect()
    }
}

/// Attribute rows of every proposal of `records`, scene after scene, with
/// the geometric columns multiplied by `geometry_scale`.
fn stacked_attributes(records: &[&SceneRecord], m: usize, geometry_scale: f64) -> Result<Array2<f64>> {
    let dim = records.first().map_or(0, |r| r.proposals.attributes().ncols());
    let mut attrs = Array2::zeros((records.len() * m, dim));
    for (b, r) in records.iter().enumerate() {
        if r.proposals.len() != m {
            return Err(Error::Shape(format!(
                "scene {} has {} proposals, model expects {m}",
                r.scene.scene_id,
                r.proposals.len()
            )));
        }
        attrs.slice_mut(ndarray::s![b * m..(b + 1) * m, ..]).assign(&r.proposals.attributes());
    }
    let geo = GEOMETRIC_DIM.min(attrs.ncols());
    attrs.slice_mut(ndarray::s![.., ..geo]).mapv_inplace(|x| x * geometry_scale);
    Ok(attrs)
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}
