//! Trains the full model and a MIL-NCE baseline with the desk config and
//! prints the overall recall rows on held-out scenes. A few minutes in
//! release mode; below about 200 training scenes the student stays near
//! random.

use ground3d::pipeline::{evaluate, train, Method, TrainConfig};
use ground3d::synth_data::{generate_corpus, GenConfig};

fn main() -> ground3d::Result<()> {
    let gen = GenConfig::default();
    let train_set = generate_corpus(&gen, 200, 0)?;
    let test_set = generate_corpus(&gen, 60, 1000)?;
    let cfg = TrainConfig::from_json(include_str!("../../../configs/desk.json"))?;

    let full = train(&train_set, &cfg, None)?;
    for l in full.log.iter().step_by(10) {
        println!(
            "epoch {:>2} lr {:.2e} total {:.3} (distill {:.3} cls {:.3} match {:.3} recon {:.3})",
            l.epoch, l.learning_rate, l.total, l.distill, l.cls, l.matching, l.recon
        );
    }
    let nce = train(&train_set, &TrainConfig { method: Method::MilNce, ..cfg.clone() }, None)?;

    let report = evaluate(&full.best, &test_set, &[&nce.best])?;
    for line in report.to_csv().lines().filter(|l| l.starts_with("method") || l.contains(",overall,")) {
        println!("{line}");
    }
    Ok(())
}
