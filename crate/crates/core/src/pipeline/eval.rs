use crate::distill::infer_top_n;
use crate::error::{Error, Result};
use crate::geometry::AxisAlignedBox;
use crate::metrics::{random_baseline, score_method, upper_bound_row, MetricRow, MetricsReport, RankedQuery, DEFAULT_CELLS};
use crate::synth_data::{derive_seed, Corpus, Split};

use super::model::Model;
use super::step::score_queries;

const EVAL_CHUNK: usize = 16;

/// Number of top predictions kept per query.
fn depth(cells: &[(usize, f64)]) -> usize {
    cells.iter().map(|c| c.0).max().unwrap_or(1)
}

fn target_box(corpus: &Corpus, scene: usize, sentence: usize) -> Result<(Split, AxisAlignedBox)> {
    let r = &corpus.records[scene];
    let s = &r.sentences[sentence];
    let obj = r
        .scene
        .object(s.target_object_id)
        .ok_or_else(|| Error::Generation(format!("{}: missing target {}", r.scene.scene_id, s.target_object_id)))?;
    Ok((s.split, obj.bbox))
}

/// Model rankings for every sentence of the given scenes, in corpus order.
pub fn rank_scenes(model: &Model, corpus: &Corpus, scenes: &[usize], n: usize) -> Result<Vec<RankedQuery>> {
    let mut out = Vec::new();
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let records: Vec<_> = chunk.iter().map(|&i| &corpus.records[i]).collect();
        let queries: Vec<_> = records
            .iter()
            .enumerate()
            .flat_map(|(s, r)| r.sentences.iter().map(move |q| (s, q)))
            .collect();
        let scores = score_queries(model, &records, &queries)?;
        let mut q = 0;
        for (s, &scene) in chunk.iter().enumerate() {
            for i in 0..records[s].sentences.len() {
                let (split, gt) = target_box(corpus, scene, i)?;
                let top = infer_top_n(scores.row(q), n)?;
                out.push(RankedQuery {
                    split,
                    gt,
                    ranked: top.into_iter().map(|j| records[s].proposals.boxes[j]).collect(),
                });
                q += 1;
            }
        }
    }
    Ok(out)
}

/// Recall rows of `model` over a subset of scenes.
pub fn evaluate_scenes(model: &Model, corpus: &Corpus, scenes: &[usize], cells: &[(usize, f64)]) -> Result<Vec<MetricRow>> {
    let ranked = rank_scenes(model, corpus, scenes, depth(cells))?;
    score_method(model.config.method.name(), &ranked, cells)
}

fn all_scenes(corpus: &Corpus) -> Vec<usize> {
    (0..corpus.records.len()).filter(|&i| !corpus.records[i].sentences.is_empty()).collect()
}

/// Random-ranking rows; query `q` uses the permutation seeded by `(seed, q)`.
pub fn random_rows(corpus: &Corpus, seed: u64, cells: &[(usize, f64)]) -> Result<Vec<MetricRow>> {
    let mut ranked = Vec::new();
    let mut q = 0u64;
    for scene in all_scenes(corpus) {
        let r = &corpus.records[scene];
        for i in 0..r.sentences.len() {
            let (split, gt) = target_box(corpus, scene, i)?;
            let order = random_baseline(r.proposals.len(), derive_seed(seed, q, 21));
            ranked.push(RankedQuery {
                split,
                gt,
                ranked: order.into_iter().map(|j| r.proposals.boxes[j]).collect(),
            });
            q += 1;
        }
    }
    score_method("random", &ranked, cells)
}

/// Max-IoU oracle rows for the corpus.
pub fn upper_bound_rows(corpus: &Corpus, cells: &[(usize, f64)]) -> Result<Vec<MetricRow>> {
    let mut queries = Vec::new();
    for scene in all_scenes(corpus) {
        for i in 0..corpus.records[scene].sentences.len() {
            let (split, gt) = target_box(corpus, scene, i)?;
            queries.push((split, gt, corpus.records[scene].proposals.boxes.as_slice()));
        }
    }
    upper_bound_row(&queries, cells)
}

/// Report for `model` on every sentence of `corpus`, with rows for each of
/// `baselines` (e.g. MIL models) and the Random and Upper Bound references.
pub fn evaluate(model: &Model, corpus: &Corpus, baselines: &[&Model]) -> Result<MetricsReport> {
    let cells = DEFAULT_CELLS;
    let scenes = all_scenes(corpus);
    if scenes.is_empty() {
        return Err(Error::Empty("evaluation sentences"));
    }
    let mut rows = Vec::new();
    for m in std::iter::once(model).chain(baselines.iter().copied()) {
        m.check_compatible(corpus)?;
        rows.extend(evaluate_scenes(m, corpus, &scenes, &cells)?);
    }
    rows.extend(random_rows(corpus, model.config.seed, &cells)?);
    rows.extend(upper_bound_rows(corpus, &cells)?);
    let report = MetricsReport {
        rows,
        seed: model.config.seed,
        config_hash: model.config.hash(),
    };
    let problems = report.check();
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(format!("inconsistent report: {}", problems.join("; "))));
    }
    Ok(report)
}
