//! How reconstruction ranks turn into pseudo-labels: first by hand, then from
//! a briefly trained teacher on real scenes.

use ground3d::distill::{pseudo_labels, rewards_from_ranks, PseudoLabelRecord};
use ground3d::pipeline::{teacher_labels, train, TrainConfig};
use ground3d::synth_data::{generate_corpus, GenConfig};

fn main() -> ground3d::Result<()> {
    // candidate 2 reconstructed best, then 0, 5 and 7
    let candidates = [2, 0, 5, 7];
    let rewards = rewards_from_ranks(&[0, 1, 2, 3])?;
    let label = pseudo_labels(&rewards, &candidates, 8, 1.0)?;
    println!("rewards {rewards:.3?}");
    println!("label   {:.4}", label.d);
    println!("mass on candidates {:.3}", label.candidate_mass());

    let corpus = generate_corpus(&GenConfig::default(), 24, 3)?;
    let cfg = TrainConfig {
        hidden_dim: 16,
        epochs: 3,
        batch_scenes: 4,
        ..TrainConfig::default()
    };
    let outcome = train(&corpus, &cfg, None)?;
    let records: Vec<_> = corpus.records.iter().take(2).collect();
    for (query_id, label) in teacher_labels(&outcome.best, &records, 0)?.iter().take(4) {
        let mut rec = PseudoLabelRecord::new(query_id.clone(), label);
        // only the candidate entries differ from the floor value
        rec.d = rec.candidates.iter().map(|&i| (rec.d[i] * 1e4).round() / 1e4).collect();
        println!("{}", serde_json::to_string(&rec).expect("plain data serializes"));
    }
    Ok(())
}
