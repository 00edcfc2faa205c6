//! Recording-level classification metrics with Abnormal as the positive
//! class.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::Label;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(predicted: &[Label], truth: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (p, t) in predicted.iter().zip(truth) {
            match (p, t) {
                (Label::Abnormal, Label::Abnormal) => c.tp += 1,
                (Label::Normal, Label::Normal) => c.tn += 1,
                (Label::Abnormal, Label::Normal) => c.fp += 1,
                (Label::Normal, Label::Abnormal) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn ppv(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this value are called Abnormal. The first point
    /// uses `+inf`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub auc: Option<f64>,
    pub confusion: Confusion,
    /// Written separately as CSV; `+inf` has no JSON form.
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

/// ROC from a descending sweep over the distinct scores. Empty when either
/// class is absent.
pub fn roc_curve(scores: &[f64], truth: &[Label]) -> Vec<RocPoint> {
    let pos = truth.iter().filter(|&&t| t == Label::Abnormal).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            match truth[order[i]] {
                Label::Abnormal => tp += 1,
                Label::Normal => fp += 1,
            }
            i += 1;
        }
        roc.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    roc
}

/// Trapezoidal area under an ROC curve.
pub fn auc(roc: &[RocPoint]) -> Option<f64> {
    if roc.len() < 2 {
        return None;
    }
    Some(
        roc.windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[1].tpr + w[0].tpr))
            .sum(),
    )
}

pub fn evaluate(predicted: &[Label], scores: &[f64], truth: &[Label]) -> Result<Metrics> {
    if predicted.len() != truth.len() || scores.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions and {} scores for {} truths",
            predicted.len(),
            scores.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("recording score".into()));
    }
    let confusion = Confusion::from_labels(predicted, truth);
    let roc = roc_curve(scores, truth);
    Ok(Metrics {
        accuracy: confusion.accuracy(),
        sensitivity: confusion.sensitivity(),
        specificity: confusion.specificity(),
        ppv: confusion.ppv(),
        auc: auc(&roc),
        confusion,
        roc,
    })
}

pub fn write_roc_csv(path: impl AsRef<Path>, roc: &[RocPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in roc {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_json(path: impl AsRef<Path>, metrics: &Metrics) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(metrics)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use Label::{Abnormal as A, Normal as N};

    /// Probability that a random abnormal outscores a random normal, ties
    /// counted one half.
    fn concordance(scores: &[f64], truth: &[Label]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &ti) in truth.iter().enumerate() {
            for (j, &tj) in truth.iter().enumerate() {
                if ti == A && tj == N {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_and_inverted_scores() {
        let truth = [N, N, A, A];
        assert_eq!(auc(&roc_curve(&[0.1, 0.2, 0.8, 0.9], &truth)), Some(1.0));
        assert_eq!(auc(&roc_curve(&[0.9, 0.8, 0.2, 0.1], &truth)), Some(0.0));
        assert_eq!(auc(&roc_curve(&[0.5; 4], &truth)), Some(0.5));
        assert_eq!(auc(&roc_curve(&[0.1, 0.2], &[N, N])), None);
    }

    #[test]
    fn auc_matches_concordance_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let truth: Vec<Label> = (0..20).map(|i| if i < 10 || rng.gen_bool(0.3) { N } else { A }).collect();
            // Coarse scores to exercise ties.
            let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
            let a = auc(&roc_curve(&scores, &truth)).unwrap();
            assert!((a - concordance(&scores, &truth)).abs() < 1e-9);
        }
    }

    #[test]
    fn confusion_rates() {
        let m = evaluate(&[A, A, N, N, A], &[1.0, 0.9, 0.1, 0.2, 0.8], &[A, N, N, A, A]).unwrap();
        assert_eq!(
            m.confusion,
            Confusion {
                tp: 2,
                tn: 1,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!(m.accuracy, 0.6);
        assert_eq!(m.sensitivity, Some(2.0 / 3.0));
        assert_eq!(m.specificity, Some(0.5));
        assert_eq!(m.ppv, Some(2.0 / 3.0));
        let none_positive = evaluate(&[N, N], &[0.0, 0.0], &[N, A]).unwrap();
        assert_eq!(none_positive.ppv, None);
        assert!(evaluate(&[N], &[0.0], &[N, A]).is_err());
        assert!(evaluate(&[], &[], &[]).is_err());
    }

    #[test]
    fn roc_is_monotone() {
        let roc = roc_curve(&[0.3, 0.7, 0.7, 0.1, 0.5], &[N, A, N, A, A]);
        assert_eq!(roc.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(roc.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        for w in roc.windows(2) {
            assert!(w[1].threshold < w[0].threshold);
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    proptest! {
        #[test]
        fn balanced_accuracy_identity(pred in prop::collection::vec(any::<bool>(), 20)) {
            let truth: Vec<Label> = (0..20).map(|i| if i % 2 == 0 { A } else { N }).collect();
            let predicted: Vec<Label> = pred.iter().map(|&p| if p { A } else { N }).collect();
            let c = Confusion::from_labels(&predicted, &truth);
            let balanced = 0.5 * (c.sensitivity().unwrap() + c.specificity().unwrap());
            prop_assert!((c.accuracy() - balanced).abs() < 1e-9);
        }
    }
}
