use oncall_core::domain::MetricsReport;
use proptest::prelude::*;

/// Straight-line recomputation from the raw pairs, one class at a time.
fn oracle(gold: &[String], pred: &[String]) -> (f64, f64, f64, f64) {
    let mut classes: Vec<&String> = gold.iter().chain(pred).collect();
    classes.sort();
    classes.dedup();
    let n = gold.len() as f64;
    let (mut p_w, mut r_w, mut f_w, mut correct) = (0.0, 0.0, 0.0, 0.0);
    for c in classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        let mut support = 0.0;
        for (g, p) in gold.iter().zip(pred) {
            if g == c {
                support += 1.0;
            }
            if g == c && p == c {
                tp += 1.0;
            } else if p == c {
                fp += 1.0;
            } else if g == c {
                fn_ += 1.0;
            }
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        p_w += support * prec;
        r_w += support * rec;
        f_w += support * f1;
        correct += tp;
    }
    if n == 0.0 {
        return (0.0, 0.0, 0.0, 0.0);
    }
    (correct / n, p_w / n, r_w / n, f_w / n)
}

fn labels() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
    let label = prop::sample::select(vec!["Within Scope", "Out of Scope", "No assistance needed"]).prop_map(String::from);
    prop::collection::vec((label.clone(), label), 0..200).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn report_matches_oracle((gold, pred) in labels()) {
        let r = MetricsReport::from_labels(&gold, &pred).unwrap();
        let (acc, p, rec, f) = oracle(&gold, &pred);
        prop_assert!((r.accuracy - acc).abs() <= 1e-12);
        prop_assert!((r.precision_w - p).abs() <= 1e-12);
        prop_assert!((r.recall_w - rec).abs() <= 1e-12);
        prop_assert!((r.f1_w - f).abs() <= 1e-12);
        // every item has exactly one gold label, so weighted recall is accuracy
        prop_assert!((r.recall_w - r.accuracy).abs() <= 1e-12);
        for m in r.per_class.values() {
            prop_assert_eq!(m.tp + m.fp + m.fn_ + m.tn, r.total);
        }
    }
}

#[test]
fn misaligned_inputs_rejected() {
    assert!(MetricsReport::from_labels(&["a"], &["a", "b"]).is_err());
}

#[test]
fn degenerate_predictor() {
    let gold = ["A", "A", "B", "B"];
    let pred = ["A"; 4];
    assert_eq!(MetricsReport::from_labels(&gold, &pred).unwrap().accuracy, 0.5);
}
