mod common;

use common::{detector_corpus, five_query_example};
use ground3d::metrics::{recall_at, score_method, EvalSplit, MetricRow, MetricsReport, RankedQuery, DEFAULT_CELLS};
use ground3d::pipeline::{random_rows, upper_bound_rows};
use ground3d::synth_data::Split;

#[test]
fn five_query_hand_count() {
    let (preds, gts) = five_query_example();
    assert_eq!(recall_at(&preds, &gts, 1, 0.5).unwrap(), 40.0);
    assert_eq!(recall_at(&preds, &gts, 1, 0.25).unwrap(), 80.0);
    assert_eq!(recall_at(&preds, &gts, 3, 0.5).unwrap(), 60.0);
    assert_eq!(recall_at(&preds, &gts, 3, 0.25).unwrap(), 100.0);
    assert!(recall_at(&preds, &gts, 4, 0.25).is_err());
    assert!(recall_at(&preds[..4], &gts, 1, 0.25).is_err());
}

#[test]
fn splits_partition_the_queries() {
    let (preds, gts) = five_query_example();
    let splits = [Split::Unique, Split::Multiple, Split::Unique, Split::Multiple, Split::Multiple];
    let queries: Vec<RankedQuery> = (0..5)
        .map(|i| RankedQuery {
            split: splits[i],
            gt: gts[i],
            ranked: preds[i].clone(),
        })
        .collect();
    let rows = score_method("m", &queries, &DEFAULT_CELLS).unwrap();
    let get = |s: EvalSplit, n: usize, m: f64| rows.iter().find(|r| r.split == s && r.n == n && r.m == m).unwrap();
    // unique: queries 1 and 3, top-1 IoUs 0.6 and 0.3
    assert_eq!(get(EvalSplit::Unique, 1, 0.5).recall, 50.0);
    assert_eq!(get(EvalSplit::Unique, 1, 0.5).num_queries, 2);
    // multiple: queries 2, 4, 5, top-1 IoUs 0.6, 0.3, 0.1
    assert!((get(EvalSplit::Multiple, 1, 0.25).recall - 200.0 / 3.0).abs() < 1e-12);
    let report = MetricsReport {
        rows,
        seed: 0,
        config_hash: "x".into(),
    };
    assert!(report.check().is_empty());
}

#[test]
fn report_check_flags_violations() {
    let row = |method: &str, n: usize, m: f64, recall: f64| MetricRow {
        method: method.into(),
        split: EvalSplit::Unique,
        n,
        m,
        recall,
        num_queries: 10,
    };
    let report = MetricsReport {
        rows: vec![
            row("a", 1, 0.5, 50.0),
            row("a", 3, 0.5, 40.0),
            row("upper_bound", 1, 0.5, 45.0),
            row("upper_bound", 3, 0.5, 90.0),
        ],
        seed: 0,
        config_hash: "x".into(),
    };
    let problems = report.check();
    assert!(problems.iter().any(|p| p.contains("exceeds upper bound")));
    assert!(problems.iter().any(|p| p.contains("R@3,0.5 = 40")));
}

#[test]
fn csv_layout() {
    let (preds, gts) = five_query_example();
    let queries: Vec<RankedQuery> = (0..5)
        .map(|i| RankedQuery {
            split: Split::Unique,
            gt: gts[i],
            ranked: preds[i].clone(),
        })
        .collect();
    let report = MetricsReport {
        rows: score_method("full", &queries, &[(1, 0.5)]).unwrap(),
        seed: 7,
        config_hash: "abc".into(),
    };
    assert_eq!(
        report.to_csv(),
        "method,split,n,m,recall,num_queries,seed,config_hash\n\
         full,overall,1,0.5,40.0000,5,7,abc\n\
         full,unique,1,0.5,40.0000,5,7,abc\n"
    );
}

#[test]
fn perfect_detector_has_full_upper_bound() {
    let corpus = detector_corpus(0.0, 0.0, 20, 3);
    for r in upper_bound_rows(&corpus, &DEFAULT_CELLS).unwrap() {
        assert_eq!(r.recall, 100.0, "{r:?}");
    }
}

#[test]
fn random_stays_under_upper_bound() {
    let corpus = detector_corpus(0.05, 0.1, 30, 4);
    let mut rows = random_rows(&corpus, 1, &DEFAULT_CELLS).unwrap();
    rows.extend(upper_bound_rows(&corpus, &DEFAULT_CELLS).unwrap());
    let report = MetricsReport {
        rows,
        seed: 1,
        config_hash: "x".into(),
    };
    assert!(report.check().is_empty(), "{:?}", report.check());
}
