//! Trainable feature extractors: proposal attributes to object features,
//! token sequences to sentence features, the text classifier, and the fixed
//! class transform between detector and text class vocabularies.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, GruCell, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::synth_data::Embeddings;
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentencePooling {
    FinalState,
    Mean,
}

/// Token embedding table; row 0 belongs to the mask token.
#[derive(Debug, Clone)]
pub struct VocabEmbedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl VocabEmbedding {
    /// Rows come from `init` where a word has a vector (rescaled to unit
    /// norm), otherwise from a small random draw.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        words: &[&str],
        dim: usize,
        init: Option<&Embeddings>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut table = Mat::zeros((words.len(), dim));
        for (i, w) in words.iter().enumerate() {
            match init.and_then(|e| e.vectors.get(*w)) {
                Some(v) => {
                    if v.len() != dim {
                        return Err(Error::Shape(format!("embedding for `{w}` has {} dims, want {dim}", v.len())));
                    }
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    for (j, x) in v.iter().enumerate() {
                        table[[i, j]] = x / norm;
                    }
                }
                None => {
                    for j in 0..dim {
                        table[[i, j]] = rng.random_range(-1.0..1.0) / (dim as f64).sqrt();
                    }
                }
            }
        }
        Ok(Self {
            table: store.add(format!("{name}.table"), table),
            vocab_size: words.len(),
            dim,
        })
    }
}

#[derive(Debug, Clone)]
struct AttributeLayer {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

/// Projects attribute rows to `d` and mixes proposals of the same scene with
/// stacked self-attention layers.
#[derive(Debug, Clone)]
pub struct AttributeEncoder {
    input: Linear,
    input_norm: LayerNorm,
    layers: Vec<AttributeLayer>,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl AttributeEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| AttributeLayer {
                attention: MultiHeadAttention::new(store, &format!("{name}.l{l}.attn"), hidden_dim, num_heads, rng),
                norm1: LayerNorm::new(store, &format!("{name}.l{l}.norm1"), hidden_dim),
                ffn: FeedForward::new(store, &format!("{name}.l{l}.ffn"), hidden_dim, 2 * hidden_dim, rng),
                norm2: LayerNorm::new(store, &format!("{name}.l{l}.norm2"), hidden_dim),
            })
            .collect();
        Self {
            input: Linear::new(store, &format!("{name}.input"), input_dim, hidden_dim, rng),
            input_norm: LayerNorm::new(store, &format!("{name}.input_norm"), hidden_dim),
            layers,
            input_dim,
            hidden_dim,
        }
    }

    /// Linear projection of the raw attributes, before any normalisation or attention.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, attributes: Var) -> Result<Var> {
        if tape.value(attributes).ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "attributes have {} columns, encoder expects {}",
                tape.value(attributes).ncols(),
                self.input_dim
            )));
        }
        self.input.forward(tape, store, attributes)
    }

    /// `attributes` stacks the proposal rows of one or more scenes, `per_scene`
    /// rows each; attention never crosses scene boundaries.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, attributes: Var, per_scene: usize) -> Result<Var> {
        if !tape.value(attributes).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("proposal attributes".into()));
        }
        let x = self.project(tape, store, attributes)?;
        let mut x = self.input_norm.forward(tape, store, x)?;
        for layer in &self.layers {
            let a = layer.attention.forward(tape, store, x, x, per_scene, per_scene)?;
            let r = tape.add(x, a)?;
            x = layer.norm1.forward(tape, store, r)?;
            let f = layer.ffn.forward(tape, store, x)?;
            let r = tape.add(x, f)?;
            x = layer.norm2.forward(tape, store, r)?;
        }
        Ok(x)
    }
}

/// Output of [`SentenceEncoder::encode`] for a batch of `B` sentences of length `T`.
#[derive(Debug, Clone, Copy)]
pub struct SentenceEncoding {
    /// `B x d`
    pub pooled: Var,
    /// `(B*T) x d`, sentence-major.
    pub states: Var,
    pub length: usize,
}

#[derive(Debug, Clone)]
pub struct SentenceEncoder {
    pub embedding: VocabEmbedding,
    gru: GruCell,
    pub pooling: SentencePooling,
}

impl SentenceEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        embedding: VocabEmbedding,
        hidden_dim: usize,
        pooling: SentencePooling,
        rng: &mut R,
    ) -> Self {
        let gru = GruCell::new(store, &format!("{name}.gru"), embedding.dim, hidden_dim, rng);
        Self {
            embedding,
            gru,
            pooling,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }

    /// Runs the recurrent cell over a batch of equal-length token sequences.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, batch: &[&[usize]]) -> Result<SentenceEncoding> {
        let length = batch.first().map(|s| s.len()).ok_or(Error::Empty("sentence batch"))?;
        if length == 0 {
            return Err(Error::Empty("sentence"));
        }
        if batch.iter().any(|s| s.len() != length) {
            return Err(Error::Shape("sentences in one batch must share a length".into()));
        }
        if let Some(bad) = batch.iter().flat_map(|s| s.iter()).find(|&&t| t >= self.embedding.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token {bad} outside vocabulary of {}",
                self.embedding.vocab_size
            )));
        }
        let table = tape.param(store, self.embedding.table);
        let mut h = tape.constant(Mat::zeros((batch.len(), self.hidden_dim())));
        let mut steps = Vec::with_capacity(length);
        for t in 0..length {
            let ids: Vec<usize> = batch.iter().map(|s| s[t]).collect();
            let x = tape.gather_rows(table, &ids)?;
            h = self.gru.step(tape, store, x, h)?;
            steps.push(h);
        }
        let pooled = match self.pooling {
            SentencePooling::FinalState => h,
            SentencePooling::Mean => {
                let mut acc = steps[0];
                for &s in &steps[1..] {
                    acc = tape.add(acc, s)?;
                }
                tape.scale(acc, 1.0 / length as f64)
            }
        };
        let states = tape.stack_steps(&steps)?;
        Ok(SentenceEncoding { pooled, states, length })
    }
}

#[derive(Debug, Clone)]
pub struct TextClassifier {
    linear: Linear,
    pub num_classes: usize,
}

impl TextClassifier {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, "text_classifier", hidden_dim, num_classes, rng),
            num_classes,
        }
    }

    /// Text-class logits, `B x N_t`.
    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        self.linear.forward(tape, store, pooled)
    }
}

/// Mean cross-entropy of text-class logits against the sentence labels.
pub fn text_cls_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let per_row = tape.cross_entropy_rows(logits, labels)?;
    Ok(tape.mean(per_row))
}

/// Cosine similarities between detector class names (rows) and text class
/// names (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTransform {
    pub matrix: Array2<f64>,
    pub object_names: Vec<String>,
    pub text_names: Vec<String>,
}

fn unit(word: &str, v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroEmbedding(word.to_string()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn build_class_transform(
    object_names: &[String],
    text_names: &[String],
    embeddings: &Embeddings,
) -> Result<ClassTransform> {
    let rows = object_names
        .iter()
        .map(|n| unit(n, embeddings.get(n)?))
        .collect::<Result<Vec<_>>>()?;
    let cols = text_names
        .iter()
        .map(|n| unit(n, embeddings.get(n)?))
        .collect::<Result<Vec<_>>>()?;
    let matrix = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
        if object_names[i] == text_names[j] {
            return 1.0;
        }
        let c: f64 = rows[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
        c.clamp(-1.0, 1.0)
    });
    Ok(ClassTransform {
        matrix,
        object_names: object_names.to_vec(),
        text_names: text_names.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn emb(pairs: &[(&str, Vec<f64>)]) -> Embeddings {
        Embeddings {
            dim: pairs[0].1.len(),
            vectors: pairs.iter().map(|(w, v)| (w.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn class_transform_examples() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let e = emb(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![s, s])]);
        let ab = names(&["a", "b", "c"]);
        let m = build_class_transform(&ab, &ab, &e).unwrap();
        for i in 0..3 {
            assert_eq!(m.matrix[[i, i]], 1.0);
        }
        assert_eq!(m.matrix[[0, 1]], 0.0);
        let row = m.matrix.row(2);
        assert!((row[0] - 0.7071).abs() < 1e-4);
        assert!((row[1] - 0.7071).abs() < 1e-4);
        assert_eq!(row[2], 1.0);
    }

    #[test]
    fn class_transform_errors() {
        let e = emb(&[("a", vec![1.0, 0.0]), ("z", vec![0.0, 0.0])]);
        assert!(matches!(
            build_class_transform(&names(&["a"]), &names(&["missing"]), &e),
            Err(Error::MissingEmbedding(_))
        ));
        assert!(matches!(
            build_class_transform(&names(&["a"]), &names(&["z"]), &e),
            Err(Error::ZeroEmbedding(_))
        ));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut tape = Tape::new();
        let l = tape.leaf(Mat::zeros((3, 4)));
        let loss = text_cls_loss(&mut tape, l, &[0, 1, 3]).unwrap();
        assert!((tape.scalar(loss) - 4f64.ln()).abs() < 1e-12);
        assert!(text_cls_loss(&mut tape, l, &[0, 1, 4]).is_err());
    }

    #[test]
    fn text_loss_vanishes_for_confident_logits() {
        let mut tape = Tape::new();
        let mut logits = Mat::zeros((1, 4));
        logits[[0, 2]] = 60.0;
        let l = tape.leaf(logits);
        let loss = text_cls_loss(&mut tape, l, &[2]).unwrap();
        assert!(tape.scalar(loss) < 1e-20);
    }
}
