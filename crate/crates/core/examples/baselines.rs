//! The reference points a grounding score is read against: random choice,
//! the detector's upper bound, and the two MIL objectives.

use ground3d::metrics::{recall_at, EvalSplit, DEFAULT_CELLS};
use ground3d::pipeline::{evaluate, random_rows, train, upper_bound_rows, Method, TrainConfig};
use ground3d::synth_data::{generate_corpus, GenConfig};

fn main() -> ground3d::Result<()> {
    let gen = GenConfig::default();
    let train_set = generate_corpus(&gen, 30, 0)?;
    let test_set = generate_corpus(&gen, 10, 500)?;

    for row in random_rows(&test_set, 0, &DEFAULT_CELLS)?
        .into_iter()
        .chain(upper_bound_rows(&test_set, &DEFAULT_CELLS)?)
        .filter(|r| r.split == EvalSplit::Overall)
    {
        println!("{:<12} R@{},{:<4} {:6.2}", row.method, row.n, row.m, row.recall);
    }

    let base = TrainConfig {
        hidden_dim: 16,
        epochs: 3,
        batch_scenes: 5,
        ..TrainConfig::default()
    };
    let nce = train(&train_set, &TrainConfig { method: Method::MilNce, ..base.clone() }, None)?;
    let margin = train(&train_set, &TrainConfig { method: Method::MilMargin, ..base }, None)?;
    let report = evaluate(&nce.best, &test_set, &[&margin.best])?;
    for method in report.methods() {
        let r = report.recall(&method, EvalSplit::Overall, 1, 0.25).unwrap_or(f64::NAN);
        println!("{method:<12} R@1,0.25 {r:6.2}");
    }

    // recall_at directly: the first query hits, the second does not
    let gt = test_set.records[0].scene.objects[0].bbox;
    let miss = gt.translated([5.0, 0.0, 0.0]);
    println!("hand-built R@1,0.5 = {}", recall_at(&[vec![gt], vec![miss]], &[gt, gt], 1, 0.5)?);
    Ok(())
}
