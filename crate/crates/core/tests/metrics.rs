use biovista_core::metrics::{
    grouped_metrics, mean_accuracy, pct1, run_stats, summary_table, EvalRecord, GroupKey, MetricsError, ModelResult, ReportFormat,
};
use biovista_core::types::BioLabel;
use proptest::prelude::*;

/// `n` samples per class with exactly `hits` correct.
fn records(hits_high: usize, hits_low: usize, n: usize, year: i32) -> Vec<EvalRecord> {
    let mut v = Vec::new();
    for (label, hits) in [(BioLabel::High, hits_high), (BioLabel::Low, hits_low)] {
        for i in 0..n {
            let predicted = if i < hits { label } else { label.other() };
            v.push(EvalRecord {
                sample_id: format!("{label}_{year}_{i}"),
                label,
                predicted,
                confidence: 0.9,
                patch_id: format!("{label}_{year}_{}", i % 4),
                year,
                region: None,
            });
        }
    }
    v
}

#[test]
fn class_accuracies_round_to_one_decimal() {
    let a = mean_accuracy(&records(876, 512, 1000, 2021)).unwrap();
    assert_eq!(pct1(a.macc), "69.4");
    let b = mean_accuracy(&records(873, 636, 1000, 2021)).unwrap();
    assert!((b.macc - 0.7545).abs() < 1e-12);
    assert_eq!(pct1(b.macc), "75.5");
}

#[test]
fn empty_and_single_class() {
    assert!(matches!(mean_accuracy(&[]), Err(MetricsError::EmptyEval)));
    let only_high: Vec<_> = records(3, 0, 5, 2020).into_iter().filter(|r| r.label == BioLabel::High).collect();
    match mean_accuracy(&only_high) {
        Err(MetricsError::MissingClass(c)) => assert_eq!(c, "low"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn markdown_and_csv_agree() {
    let s = mean_accuracy(&records(7, 3, 10, 2021)).unwrap();
    let rows = vec![("m".to_string(), ModelResult::Single(s))];
    let md = summary_table(&rows, ReportFormat::Markdown);
    let csv = summary_table(&rows, ReportFormat::Csv);
    let md_cells: Vec<String> = md
        .lines()
        .nth(2)
        .unwrap()
        .split('|')
        .map(|c| c.trim().trim_end_matches('%').to_string())
        .filter(|c| !c.is_empty())
        .collect();
    let csv_cells: Vec<String> = csv.lines().nth(1).unwrap().split(',').map(String::from).collect();
    assert_eq!(md_cells, csv_cells);
}

#[test]
fn run_statistics_use_sample_std() {
    let runs: Vec<_> = [(8, 6), (9, 6), (7, 6)].iter().map(|&(h, l)| mean_accuracy(&records(h, l, 10, 2021)).unwrap()).collect();
    let st = run_stats(&runs).unwrap();
    assert!((st.acc_high.mean - 0.8).abs() < 1e-12);
    assert!((st.acc_high.std - 0.1).abs() < 1e-12);
    assert_eq!(st.acc_low.std, 0.0);
    assert!(run_stats(&runs[..1]).is_err());
}

proptest! {
    #[test]
    fn year_groups_recombine_to_global(h1 in 0usize..20, l1 in 0usize..20, h2 in 0usize..30, l2 in 0usize..30) {
        let mut all = records(h1, l1, 20, 2020);
        all.extend(records(h2, l2, 30, 2022));
        let groups = grouped_metrics(&all, GroupKey::Year).unwrap();
        prop_assert_eq!(groups.len(), 2);
        let weighted: f64 = groups.values().map(|c| c.oacc().unwrap() * c.total() as f64).sum::<f64>() / all.len() as f64;
        let global = mean_accuracy(&all).unwrap();
        prop_assert!((weighted - global.oacc).abs() < 1e-12);
        prop_assert!(global.macc >= global.acc_high.min(global.acc_low) && global.macc <= global.acc_high.max(global.acc_low));
    }
}
