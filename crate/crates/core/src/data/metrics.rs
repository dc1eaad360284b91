/// Micro-averaged scores over every class except `no_relation`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MicroF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 with `no_relation` treated as the negative class.
/// Every `0/0` is reported as 0.
pub fn micro_f1(predictions: &[usize], golds: &[usize], no_relation: Option<usize>) -> MicroF1 {
    assert_eq!(predictions.len(), golds.len(), "prediction and gold counts differ");
    let positive = |c: usize| Some(c) != no_relation;
    let mut correct = 0;
    let mut predicted = 0;
    let mut gold = 0;
    for (&p, &g) in predictions.iter().zip(golds) {
        if positive(p) {
            predicted += 1;
            if p == g {
                correct += 1;
            }
        }
        if positive(g) {
            gold += 1;
        }
    }
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MicroF1 { precision, recall, f1 }
}

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> f64 {
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    ratio(hits, golds.len())
}
