//! Trains the four loss ablation rows on one corpus and prints them with the
//! Random row.

use ground3d::metrics::EvalSplit;
use ground3d::pipeline::{run_ablation, TrainConfig};
use ground3d::synth_data::{generate_corpus, GenConfig};

fn main() -> ground3d::Result<()> {
    let gen = GenConfig::default();
    let train_set = generate_corpus(&gen, 30, 0)?;
    let test_set = generate_corpus(&gen, 10, 700)?;
    let cfg = TrainConfig {
        hidden_dim: 16,
        epochs: 4,
        batch_scenes: 5,
        ..TrainConfig::default()
    };
    let report = run_ablation(&train_set, &test_set, &cfg)?;
    println!("{:<16} {:>9} {:>9} {:>9} {:>9}", "", "R@1,.25", "R@1,.5", "R@3,.25", "R@3,.5");
    for method in report.methods() {
        let cell = |n, m| report.recall(&method, EvalSplit::Overall, n, m).unwrap_or(f64::NAN);
        println!(
            "{method:<16} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
            cell(1, 0.25),
            cell(1, 0.5),
            cell(3, 0.25),
            cell(3, 0.5)
        );
    }
    Ok(())
}
