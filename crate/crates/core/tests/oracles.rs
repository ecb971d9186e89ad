mod common;

use common::oracle;

#[test]
fn conv2d_matches_nested_loops() {
    oracle::conv_equivalence();
}

#[test]
fn classification_report_matches_definitions_exactly() {
    oracle::report_equivalence(100);
}

#[test]
fn auc_matches_all_pairs() {
    oracle::auc_equivalence(100);
}

#[test]
fn confusion_matrix_matches_counting() {
    oracle::confusion_equivalence(100);
}

#[test]
fn oracle_sanity() {
    // Hand-checked: precision 2/3, recall 1, f1 4/5, accuracy 3/4 for class 0.
    let (per_class, _) = oracle::reference_report(&[vec![2, 0], vec![1, 1]]);
    assert_eq!(per_class[0], [0.75, 2.0 / 3.0, 1.0, 0.8]);
    assert_eq!(oracle::pairwise_auc(&[0.9, 0.1, 0.5, 0.5], &[true, false, true, false]), 0.875);
}
