//! Writes the boxes and matching scores of one scene as JSON for a viewer.

use ground3d::pipeline::{export_viz, train, TrainConfig};
use ground3d::synth_data::{generate_corpus, GenConfig};

fn main() -> ground3d::Result<()> {
    let corpus = generate_corpus(&GenConfig::default(), 16, 9)?;
    let cfg = TrainConfig {
        hidden_dim: 16,
        epochs: 2,
        batch_scenes: 4,
        ..TrainConfig::default()
    };
    let model = train(&corpus, &cfg, None)?.best;
    let scene = corpus
        .records
        .iter()
        .find(|r| !r.sentences.is_empty())
        .map(|r| r.scene.scene_id.clone())
        .expect("some scene has sentences");
    let viz = export_viz(&model, &corpus, &scene, 0.25)?;
    for q in &viz.queries {
        println!("{} -> proposal {} (target object {})", q.sentence, q.best, q.target);
    }
    let path = std::env::temp_dir().join(format!("{scene}.viz.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&viz).expect("plain data serializes"))?;
    println!("wrote {}", path.display());
    Ok(())
}
