//! Synthetic grounding corpora: scenes, template sentences, simulated
//! detector proposals and their on-disk formats.

mod detector;
mod io;
mod scene;
mod sentences;
mod vocab;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use detector::{match_to_ground_truth, simulate_proposals, DetectorSimConfig, ProposalSet, GEOMETRIC_DIM};
pub use io::{read_dataset, write_dataset, Corpus, CorpusPaths, Embeddings, SceneRecord, DATASET_VERSION};
pub use scene::{generate_scene, ClassSpec, GenConfig, Scene, SceneObject};
pub use sentences::{
    generate_sentences, mask_sentence, template_vocabulary, MaskedSentence, Relation, SentenceRecord, Split,
};
pub use vocab::{default_keyword_pos, tag_keywords, Pos, VocabEntry, Vocabulary, MASK_WORD};

use crate::error::Result;

/// SplitMix64 finaliser, used to derive independent per-scene seeds.
pub fn derive_seed(base: u64, index: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Word vectors in which every class's detector name and text name share a
/// common direction, so the cosine between synonyms is high while unrelated
/// words are nearly orthogonal. Identical names get identical vectors.
pub fn synthetic_embeddings(config: &GenConfig, vocab: &Vocabulary, seed: u64) -> Embeddings {
    let dim = config.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| normal.sample(rng)).collect() };

    let mut vectors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for class in &config.classes {
        let base = draw(&mut rng);
        for name in [&class.object_name, &class.text_name] {
            if vectors.contains_key(name) {
                continue;
            }
            let noise = draw(&mut rng);
            let v = base.iter().zip(&noise).map(|(b, n)| b + 0.35 * n).collect();
            vectors.insert(name.clone(), v);
        }
    }
    for word in vocab.words() {
        if !vectors.contains_key(word) {
            vectors.insert(word.to_string(), draw(&mut rng));
        }
    }
    Embeddings { dim, vectors }
}

/// Generates `num_scenes` scenes with sentences and proposals.
pub fn generate_corpus(config: &GenConfig, num_scenes: usize, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let vocab = template_vocabulary(config)?;
    let embeddings = synthetic_embeddings(config, &vocab, derive_seed(seed, u64::MAX, 0));
    let mut records = Vec::with_capacity(num_scenes);
    for i in 0..num_scenes as u64 {
        let scene = generate_scene(config, format!("scene{seed}_{i:04}"), derive_seed(seed, i, 0))?;
        let sentences = generate_sentences(&scene, config, &vocab, derive_seed(seed, i, 1))?;
        let proposals = simulate_proposals(&scene, config, &config.detector, derive_seed(seed, i, 2))?;
        records.push(SceneRecord {
            scene,
            sentences,
            proposals,
        });
    }
    Ok(Corpus {
        config: config.clone(),
        vocab,
        embeddings,
        records,
    })
}
