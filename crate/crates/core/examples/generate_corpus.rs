//! Generates a small synthetic corpus, shows one scene with its sentences,
//! masks keywords of one of them, and writes the corpus with its sidecars.

use ground3d::synth_data::{generate_corpus, mask_sentence, GenConfig};

fn main() -> ground3d::Result<()> {
    let gen = GenConfig::default();
    let corpus = generate_corpus(&gen, 8, 42)?;
    println!(
        "{} scenes, {} sentences, vocabulary of {} words",
        corpus.records.len(),
        corpus.num_sentences(),
        corpus.vocab.len()
    );

    let record = &corpus.records[0];
    println!("scene {} ({} objects):", record.scene.scene_id, record.scene.objects.len());
    for o in &record.scene.objects {
        println!("  #{} {} {}", o.id, gen.colors[o.color_id], gen.classes[o.class_id].object_name);
    }
    for s in &record.sentences {
        println!("  [{:?}] target #{}: {}", s.split, s.target_object_id, corpus.vocab.decode(&s.tokens));
    }
    if let Some(s) = record.sentences.first() {
        let masked = mask_sentence(s, 0.3, corpus.vocab.mask_id(), 7)?;
        println!("masked at {:?}: {}", masked.positions, corpus.vocab.decode(&masked.tokens));
    }
    let p = &record.proposals;
    let hits = p.matched_gt.iter().filter(|m| m.is_some()).count();
    println!("{} proposals, {hits} matched to an object", p.len());

    let dir = std::env::temp_dir().join("ground3d-example-corpus");
    std::fs::create_dir_all(&dir)?;
    corpus.write(&dir.join("scenes.jsonl"))?;
    println!("wrote {}", dir.join("scenes.jsonl").display());
    Ok(())
}
