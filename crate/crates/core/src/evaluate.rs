//! Confusion counts, precision/recall/F1, ROC sweep and AUC.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{NtlError, Result};
use crate::ingest::Label;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One scored window: `score` is the predicted probability of NTL.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample_id: String,
    pub customer_id: String,
    pub score: f64,
    /// Only `Normal` or `Ntl` are meaningful here.
    pub truth: Label,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same counts seen with the normal class as positive.
    pub fn flipped(&self) -> Confusion {
        Confusion { tp: self.tn, fp: self.fn_, tn: self.tp, fn_: self.fp }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    /// Precision at this threshold; 0 when nothing is predicted positive.
    pub precision: f64,
}

/// Predict NTL iff `score > threshold`, and tally against the truth.
pub fn confusion(scored: &[ScoredSample], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for s in scored {
        let predicted = s.score > threshold;
        match (s.truth == Label::Ntl, predicted) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of the positive class; 0/0 is taken as 0.
pub fn prf(c: &Confusion) -> Prf {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Prf { precision, recall, f1 }
}

/// ROC curve swept over every distinct score, from `(0,0)` to `(1,1)`, and
/// the trapezoidal area under it.
pub fn roc_auc(scored: &[ScoredSample]) -> Result<(Vec<RocPoint>, f64)> {
    let pos = scored.iter().filter(|s| s.truth == Label::Ntl).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(NtlError::Undefined(format!(
            "AUC needs both classes (got {pos} NTL, {neg} normal samples)"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = scored.iter().map(|s| (s.score, s.truth == Label::Ntl)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0, precision: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // predictions `score >= t`
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            precision: ratio(tp, tp + fp),
        });
    }
    let auc = points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
    Ok((points, auc))
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn rank_auc(scored: &[ScoredSample]) -> Result<f64> {
    let pos = scored.iter().filter(|s| s.truth == Label::Ntl).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(NtlError::Undefined("AUC needs both classes".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scored.iter().map(|s| (s.score, s.truth == Label::Ntl)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: Confusion,
    pub ntl: Prf,
    pub normal: Prf,
    pub roc: Vec<RocPoint>,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub threshold: f64,
    pub samples: usize,
}

pub fn report(scored: &[ScoredSample], threshold: f64) -> MetricsReport {
    let counts = confusion(scored, threshold);
    let (roc, auc) = match roc_auc(scored) {
        Ok((r, a)) => (r, Some(a)),
        Err(_) => (Vec::new(), None),
    };
    MetricsReport {
        counts,
        ntl: prf(&counts),
        normal: prf(&counts.flipped()),
        roc,
        auc,
        threshold,
        samples: scored.len(),
    }
}

/// Majority vote over each customer's windows; ties count as NTL. The
/// customer's score is the mean window score.
pub fn per_customer(scored: &[ScoredSample], threshold: f64) -> Vec<ScoredSample> {
    let mut groups: BTreeMap<&str, Vec<&ScoredSample>> = BTreeMap::new();
    for s in scored {
        groups.entry(&s.customer_id).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(cid, v)| {
            let votes = v.iter().filter(|s| s.score > threshold).count();
            let mean = v.iter().map(|s| s.score).sum::<f64>() / v.len() as f64;
            // push the mean across the threshold when the vote disagrees with it
            let score = if 2 * votes >= v.len() {
                if mean > threshold {
                    mean
                } else {
                    threshold + f64::EPSILON
                }
            } else if mean > threshold {
                threshold
            } else {
                mean
            };
            ScoredSample { sample_id: cid.to_string(), customer_id: cid.to_string(), score, truth: v[0].truth }
        })
        .collect()
}

/// `threshold,fpr,tpr,precision` rows of the ROC sweep.
pub fn write_roc_csv<W: Write>(roc: &[RocPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "fpr", "tpr", "precision"])?;
    for p in roc {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string(), p.precision.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(score: f64, ntl: bool) -> ScoredSample {
        ScoredSample {
            sample_id: String::new(),
            customer_id: String::new(),
            score,
            truth: if ntl { Label::Ntl } else { Label::Normal },
        }
    }

    #[test]
    fn all_true_positive() {
        let v: Vec<_> = (0..7).map(|_| s(1.0, true)).collect();
        assert_eq!(confusion(&v, 0.5), Confusion { tp: 7, fp: 0, tn: 0, fn_: 0 });
        assert_eq!(confusion(&[], 0.5), Confusion::default());
    }

    #[test]
    fn tie_at_threshold_is_normal() {
        let c = confusion(&[s(0.5, true), s(0.5, false)], 0.5);
        assert_eq!(c, Confusion { tp: 0, fp: 0, tn: 1, fn_: 1 });
    }

    #[test]
    fn prf_examples() {
        let r = prf(&Confusion { tp: 5, fp: 1, tn: 0, fn_: 2 });
        let (p, rc) = (5.0 / 6.0, 5.0 / 7.0);
        assert!((r.precision - p).abs() < 1e-15);
        assert!((r.recall - rc).abs() < 1e-15);
        assert!((r.f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-15);
        assert_eq!(prf(&Confusion::default()), Prf::default());
        let r = prf(&Confusion { tp: 3, fp: 1, tn: 9, fn_: 1 });
        assert!((r.f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_edge_cases() {
        let sep: Vec<_> = (0..10).map(|i| s(i as f64 / 10.0, i >= 5)).collect();
        assert_eq!(roc_auc(&sep).unwrap().1, 1.0);
        let flat: Vec<_> = (0..10).map(|i| s(0.3, i % 3 == 0)).collect();
        assert_eq!(roc_auc(&flat).unwrap().1, 0.5);
        assert_eq!(rank_auc(&flat).unwrap(), 0.5);
        assert!(roc_auc(&[s(0.1, true)]).is_err());
    }

    #[test]
    fn roc_endpoints_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<_> = (0..200).map(|_| s((rng.gen::<f64>() * 20.0).round() / 20.0, rng.gen_bool(0.3))).collect();
        let (roc, auc) = roc_auc(&v).unwrap();
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.windows(2) {
            assert!(w[1].threshold < w[0].threshold);
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        assert!((auc - rank_auc(&v).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn majority_vote() {
        let mut v = vec![s(0.9, true), s(0.2, true), s(0.8, true), s(0.1, false), s(0.6, false), s(0.2, false)];
        for (i, x) in v.iter_mut().enumerate() {
            x.customer_id = if i < 3 { "a".into() } else { "b".into() };
        }
        let agg = per_customer(&v, 0.5);
        assert_eq!(agg.len(), 2);
        assert!(agg[0].score > 0.5 && agg[0].truth == Label::Ntl);
        assert!(agg[1].score <= 0.5);
    }
}
