//! Property tests pinning the metric and split contracts against naive
//! independent oracles.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::PathBuf;

use proptest::prelude::*;
use sdf_core::data::{CellRecord, Label, Manifest};
use sdf_core::metrics::{confusion, report, roc, wilson_ci};

/// Naive recount of every report metric straight from the label/prediction
/// lists, no shared code with `metrics::report`.
fn naive_metrics(labels: &[u8], preds: &[u8]) -> BTreeMap<&'static str, f64> {
    let count = |f: &dyn Fn(u8, u8) -> bool| {
        labels
            .iter()
            .zip(preds)
            .filter(|(&y, &p)| f(y, p))
            .count() as f64
    };
    let tp = count(&|y, p| y == 1 && p == 1);
    let tn = count(&|y, p| y == 0 && p == 0);
    let fp = count(&|y, p| y == 0 && p == 1);
    let fn_ = count(&|y, p| y == 1 && p == 0);
    let total = labels.len() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let frag_p = div(tp, tp + fp);
    let frag_r = div(tp, tp + fn_);
    let unfrag_p = div(tn, tn + fn_);
    let unfrag_r = div(tn, tn + fp);
    let f1 = |p: f64, r: f64| div(2.0 * p * r, p + r);
    let mut out = BTreeMap::new();
    out.insert("sensitivity", frag_r);
    out.insert("specificity", unfrag_r);
    out.insert("precision", frag_p);
    out.insert("accuracy", (tp + tn) / total);
    out.insert("f1", f1(frag_p, frag_r));
    out.insert("macro_precision", (frag_p + unfrag_p) / 2.0);
    out.insert("macro_recall", (frag_r + unfrag_r) / 2.0);
    out.insert("macro_f1", (f1(frag_p, frag_r) + f1(unfrag_p, unfrag_r)) / 2.0);
    out.insert(
        "weighted_f1",
        ((tn + fp) * f1(unfrag_p, unfrag_r) + (tp + fn_) * f1(frag_p, frag_r)) / total,
    );
    out
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly, ties
/// counted half.
fn pairwise_auc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut concordant = 0.0;
    let mut pairs = 0.0;
    for (&yi, &si) in labels.iter().zip(scores) {
        if yi != 1 {
            continue;
        }
        for (&yj, &sj) in labels.iter().zip(scores) {
            if yj != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                concordant += 1.0;
            } else if si == sj {
                concordant += 0.5;
            }
        }
    }
    concordant / pairs
}

proptest! {
    #[test]
    fn report_matches_naive_recount(
        pairs in prop::collection::vec((0u8..2, 0u8..2), 1..500)
    ) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion(&labels, &preds).unwrap();
        let r = report(&cm).unwrap();
        let naive = naive_metrics(&labels, &preds);
        let checks = [
            (r.sensitivity.value, naive["sensitivity"]),
            (r.specificity.value, naive["specificity"]),
            (r.precision.value, naive["precision"]),
            (r.accuracy, naive["accuracy"]),
            (r.f1, naive["f1"]),
            (r.macro_avg.precision, naive["macro_precision"]),
            (r.macro_avg.recall, naive["macro_recall"]),
            (r.macro_avg.f1, naive["macro_f1"]),
            (r.weighted_avg.f1, naive["weighted_f1"]),
        ];
        for (ours, oracle) in checks {
            prop_assert!((ours - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn trapezoid_auc_equals_pairwise_concordance(
        samples in prop::collection::vec((0u8..2, 0u32..20), 2..200)
    ) {
        let labels: Vec<u8> = samples.iter().map(|s| s.0).collect();
        // Coarse score grid so ties actually occur.
        let scores: Vec<f64> = samples.iter().map(|s| s.1 as f64 / 20.0).collect();
        prop_assume!(labels.iter().any(|&y| y == 1) && labels.iter().any(|&y| y == 0));
        let (_, auc) = roc(&labels, &scores).unwrap();
        prop_assert!((auc - pairwise_auc(&labels, &scores)).abs() < 1e-12);
    }

    #[test]
    fn wilson_contains_point_estimate(s in 0u64..200, extra in 1u64..200) {
        let n = s + extra;
        let (lo, hi) = wilson_ci(s, n, 0.95).unwrap();
        let p = s as f64 / n as f64;
        prop_assert!(lo <= p && p <= hi);
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
    }

    #[test]
    fn grouped_split_never_leaks_patients(
        assignments in prop::collection::vec(0usize..12, 6..120),
        seed in any::<u64>(),
        val_count in 1usize..5,
    ) {
        let records: Vec<CellRecord> = assignments
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut annotations = BTreeMap::new();
                annotations.insert(
                    "round_1".to_string(),
                    if i % 3 == 0 { Label::Null } else if i % 2 == 0 { Label::Fragmented } else { Label::Unfragmented },
                );
                CellRecord {
                    cell_id: format!("c{i}"),
                    patient_id: format!("p{p}"),
                    phase_contrast: PathBuf::from("x.png"),
                    bright_field: None,
                    fluorescence: None,
                    annotations,
                }
            })
            .collect();
        let manifest = Manifest::new(records, 0.1, "round_1").unwrap();
        let n_patients = manifest.patients().len();
        prop_assume!(val_count < n_patients);

        let split = manifest.grouped_split(val_count, seed).unwrap();
        prop_assert!(split.train_patients.is_disjoint(&split.val_patients));
        let union: Vec<String> = split
            .train_patients
            .union(&split.val_patients)
            .cloned()
            .collect();
        prop_assert_eq!(union, manifest.patients());

        // Materialized record lists partition the supervised set exactly.
        let (supervised, _) = manifest.filter_supervised("round_1");
        let train_set: HashSet<String> = split.train_patients.iter().cloned().collect();
        let val_set: HashSet<String> = split.val_patients.iter().cloned().collect();
        let n_train = supervised.records_for_patients(&train_set).len();
        let n_val = supervised.records_for_patients(&val_set).len();
        prop_assert_eq!(n_train + n_val, supervised.records.len());
    }
}
