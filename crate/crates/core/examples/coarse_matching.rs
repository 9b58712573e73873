//! Class-level coarse matching on its own: detector class probabilities are
//! mapped into the text class space through the class transform and compared
//! with each sentence's class, then the top-K proposals are kept.

use ground3d::coarse::{object_sentence_similarity, select_top_k, SimilarityConfig};
use ground3d::encoders::build_class_transform;
use ground3d::synth_data::{generate_corpus, GenConfig};
use ndarray::{Array1, Array2};

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn main() -> ground3d::Result<()> {
    let gen = GenConfig::default();
    let corpus = generate_corpus(&gen, 20, 1)?;
    let objects: Vec<String> = gen.classes.iter().map(|c| c.object_name.clone()).collect();
    let texts: Vec<String> = gen.classes.iter().map(|c| c.text_name.clone()).collect();
    let transform = build_class_transform(&objects, &texts, &corpus.embeddings)?;
    println!("class transform (rows detector classes, columns text classes):");
    for (i, row) in transform.matrix.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:5.2}")).collect();
        println!("  {:>9} {}", objects[i], cells.join(" "));
    }

    // class term only: the feature term needs trained encoders
    let cfg = SimilarityConfig {
        use_feature_term: false,
        ..SimilarityConfig::default()
    };
    let k = 4;
    let (mut queries, mut covered) = (0, 0);
    for r in &corpus.records {
        let probs = softmax_rows(&r.proposals.class_logit_matrix());
        let no_features = Array2::zeros((r.proposals.len(), 1));
        for s in &r.sentences {
            let mut text = Array1::zeros(texts.len());
            text[s.text_class_id] = 1.0;
            let sim = object_sentence_similarity(
                no_features.view(),
                probs.view(),
                Array1::zeros(1).view(),
                text.view(),
                transform.matrix.view(),
                &cfg,
            )?;
            let top = select_top_k(sim.values.view(), k)?;
            queries += 1;
            if top.indices.iter().any(|&j| r.proposals.matched_gt[j] == Some(s.target_object_id)) {
                covered += 1;
            }
        }
    }
    println!(
        "top-{k} by class alone contains a proposal of the described object for {covered}/{queries} sentences"
    );
    Ok(())
}
