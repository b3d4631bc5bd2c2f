//! Evaluation metrics and the mistake-detection baselines.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Cb2mError, Result};
use crate::model::CbmModel;
use crate::types::Sample;

/// A metric that may be undefined on degenerate inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricValue {
    Value(f64),
    /// The metric's denominator vanished (e.g. a single-class label set).
    Undefined,
    /// NRI with no achievable improvement (`acc_max == acc_base`).
    Saturated,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(v),
            _ => None,
        }
    }
}

impl From<f64> for MetricValue {
    fn from(v: f64) -> Self {
        Self::Value(v)
    }
}

impl From<Option<f64>> for MetricValue {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Self::Undefined, Self::Value)
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // `{:?}` prints the shortest representation that round-trips
            Self::Value(v) => write!(f, "{v:?}"),
            Self::Undefined => f.write_str("undefined"),
            Self::Saturated => f.write_str("saturated"),
        }
    }
}

/// Fraction of `predicted` equal to `truth`; `None` for empty input.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Option<f64> {
    if predicted.is_empty() {
        return None;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Some(hits as f64 / predicted.len() as f64)
}

/// Normalized relative improvement in percent. The ratio is formed before
/// scaling so that `acc == acc_max` yields exactly 100.
pub fn nri(acc: f64, acc_base: f64, acc_max: f64) -> MetricValue {
    match acc_max.partial_cmp(&acc_base) {
        Some(Ordering::Greater) => MetricValue::Value((acc - acc_base) / (acc_max - acc_base) * 100.0),
        Some(Ordering::Equal) => MetricValue::Saturated,
        _ => MetricValue::Undefined,
    }
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    check_len("labels", scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Cb2mError::InvalidValue("NaN detection score".into()));
    }
    Ok(())
}

/// Groups of equal scores in descending score order, as `(positives, negatives)`.
fn tie_groups_descending(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<f64> = None;
    for i in order {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed above");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Cb2mError::Undefined("AUROC needs both classes"));
    }
    // walk from the highest score: each negative is beaten by every positive
    // seen so far and ties with the positives in its own group
    let mut pos_above = 0usize;
    let mut twice_wins = 0u128;
    for (pos, neg) in tie_groups_descending(scores, labels) {
        twice_wins += (neg as u128) * (2 * pos_above + pos) as u128;
        pos_above += pos;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Step-wise area under the precision-recall curve over descending,
/// tie-grouped thresholds.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Cb2mError::Undefined("AUPR needs at least one positive"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (pos, neg) in tie_groups_descending(scores, labels) {
        tp += pos;
        fp += neg;
        if pos > 0 {
            area += (pos as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(decisions: &[bool], labels: &[bool]) -> Self {
        let mut c = Self::default();
        for (&d, &l) in decisions.iter().zip(labels) {
            match (d, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// F1 of the positive class; zero when there is no true positive.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }
}

pub fn f1_score(decisions: &[bool], labels: &[bool]) -> f64 {
    Confusion::new(decisions, labels).f1()
}

/// `(FP / (FP + TN), FN / (FN + TP))`, each `None` when its denominator is zero.
pub fn fpr_fnr(decisions: &[bool], labels: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    check_len("labels", decisions.len(), labels.len())?;
    let c = Confusion::new(decisions, labels);
    let rate = |num: usize, other: usize| (num + other > 0).then(|| num as f64 / (num + other) as f64);
    Ok((rate(c.fp, c.tn), rate(c.fn_, c.tp)))
}

/// Mistake scores (higher means more likely wrong) with thresholded decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub scores: Vec<f64>,
    pub decisions: Vec<bool>,
    /// `decisions[i] == (scores[i] >= threshold)`; `None` for fused detectors
    /// whose decisions are combined directly.
    pub threshold: Option<f64>,
}

impl DetectorOutput {
    pub fn thresholded(scores: Vec<f64>, threshold: f64) -> Self {
        let decisions = scores.iter().map(|&s| s >= threshold).collect();
        Self {
            scores,
            decisions,
            threshold: Some(threshold),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_flagged(&self) -> usize {
        self.decisions.iter().filter(|&&d| d).count()
    }
}

/// Threshold on `scores` maximizing F1 against `labels`. Candidates are the
/// distinct scores plus `+inf` (flag nothing); ties go to the higher threshold.
pub fn f1_optimal_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_pos = labels.iter().filter(|&&l| l).count();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (tp + fp + n_pos) as f64
        };
        if f1 > best.1 {
            best = (s, f1);
        }
    }
    best.0
}

/// Maximum-softmax-probability baseline: score `1 - max_class_prob`,
/// threshold picked by F1 on `val`.
pub fn softmax_detector(model: &CbmModel, data: &[Sample], val: &[Sample]) -> Result<DetectorOutput> {
    let score_and_label = |split: &[Sample]| -> Result<(Vec<f64>, Vec<bool>)> {
        let mut scores = Vec::with_capacity(split.len());
        let mut wrong = Vec::with_capacity(split.len());
        for x in split {
            let p = model.predict(x)?;
            scores.push(1.0 - p.class_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            wrong.push(p.label != x.label_true);
        }
        Ok((scores, wrong))
    };
    let (val_scores, val_wrong) = score_and_label(val)?;
    let threshold = f1_optimal_threshold(&val_scores, &val_wrong);
    let (scores, _) = score_and_label(data)?;
    Ok(DetectorOutput::thresholded(scores, threshold))
}

/// Uniform random scores; the top `round(mistake_rate * n)` are flagged.
pub fn random_detector(n: usize, mistake_rate: f64, seed: u64) -> DetectorOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let n_flag = ((mistake_rate.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let threshold = if n_flag == 0 {
        f64::INFINITY
    } else {
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[n_flag - 1]
    };
    DetectorOutput::thresholded(scores, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Flag only when both detectors flag.
    FullAgreement,
    /// Flag when either detector flags.
    Partial,
}

/// Average-rank normalization to `[0, 1]`.
pub fn rank_normalize(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    if n <= 1 {
        return vec![0.5; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 / (n - 1) as f64;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Fuses two detectors: decisions by AND / OR, scores by min / max of the
/// rank-normalized inputs.
pub fn combined_detector(a: &DetectorOutput, b: &DetectorOutput, mode: CombineMode) -> Result<DetectorOutput> {
    check_len("detector outputs", a.len(), b.len())?;
    let (ra, rb) = (rank_normalize(&a.scores), rank_normalize(&b.scores));
    let (scores, decisions) = match mode {
        CombineMode::FullAgreement => (
            ra.iter().zip(&rb).map(|(x, y)| x.min(*y)).collect(),
            a.decisions.iter().zip(&b.decisions).map(|(x, y)| *x && *y).collect(),
        ),
        CombineMode::Partial => (
            ra.iter().zip(&rb).map(|(x, y)| x.max(*y)).collect(),
            a.decisions.iter().zip(&b.decisions).map(|(x, y)| *x || *y).collect(),
        ),
    };
    Ok(DetectorOutput {
        scores,
        decisions,
        threshold: None,
    })
}

/// Picks the fusion mode with the higher validation F1 (full agreement on ties).
pub fn select_combine_mode(a: &DetectorOutput, b: &DetectorOutput, labels: &[bool]) -> Result<CombineMode> {
    check_len("labels", a.len(), labels.len())?;
    let and = combined_detector(a, b, CombineMode::FullAgreement)?;
    let or = combined_detector(a, b, CombineMode::Partial)?;
    Ok(if f1_score(&or.decisions, labels) > f1_score(&and.decisions, labels) {
        CombineMode::Partial
    } else {
        CombineMode::FullAgreement
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BottleneckModel, PredictorModel};
    use crate::types::SampleId;
    use proptest::prelude::*;
    use rand::Rng;

    /// Counts every positive/negative pair directly.
    fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn nri_formula() {
        assert!((nri(0.8, 0.6, 1.0).value().unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(nri(1.0, 0.6, 1.0), MetricValue::Value(100.0));
        assert_eq!(nri(0.6, 0.6, 1.0), MetricValue::Value(0.0));
        assert_eq!(nri(0.7, 0.7, 0.7), MetricValue::Saturated);
        assert_eq!(nri(0.7, 0.9, 0.8), MetricValue::Undefined);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        // pairs: (0.9>0.8) (0.9>0.3) (0.4<0.8) (0.4>0.3) -> 3/4
        assert_eq!(auroc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Cb2mError::Undefined(_))));
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(aupr(&[0.2, 0.5, 0.1], &[true, true, true]).unwrap(), 1.0);
        // precision 1 at recall 1/2, precision 2/3 at recall 1
        let v = aupr(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((v - 5.0 / 6.0).abs() < 1e-15);
        assert!(aupr(&[0.2], &[false]).is_err());
    }

    #[test]
    fn error_rates() {
        let labels = [true, false, true, false];
        assert_eq!(fpr_fnr(&labels, &labels).unwrap(), (Some(0.0), Some(0.0)));
        assert_eq!(fpr_fnr(&[true; 4], &labels).unwrap(), (Some(1.0), Some(0.0)));
        let inverted: Vec<bool> = labels.iter().map(|l| !l).collect();
        assert_eq!(fpr_fnr(&inverted, &labels).unwrap(), (Some(1.0), Some(1.0)));
        assert_eq!(fpr_fnr(&[true], &[true]).unwrap(), (None, Some(0.0)));
    }

    #[test]
    fn random_detector_behaviour() {
        let a = random_detector(500, 0.1, 3);
        assert_eq!(a, random_detector(500, 0.1, 3));
        assert_eq!(a.n_flagged(), 50);
        assert_eq!(random_detector(10, 0.0, 1).n_flagged(), 0);
    }

    /// Monte Carlo over 100 seeds, n = 500 with a 20% positive rate.
    #[test]
    fn random_detector_is_uninformative() {
        let labels: Vec<bool> = (0..500).map(|i| i % 5 == 0).collect();
        let mean: f64 = (0..100)
            .map(|seed| auroc(&random_detector(500, 0.2, seed).scores, &labels).unwrap())
            .sum::<f64>()
            / 100.0;
        assert!((0.45..=0.55).contains(&mean), "mean AUROC {mean}");
    }

    #[test]
    fn f1_threshold_choice() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(f1_optimal_threshold(&scores, &labels), 0.8);
        assert_eq!(f1_optimal_threshold(&scores, &[false; 4]), f64::INFINITY);
    }

    fn constant_model() -> CbmModel {
        CbmModel::new(BottleneckModel::zeros(2, 2, 3), PredictorModel::zeros(3, 2), 0).unwrap()
    }

    fn sample(id: u64, label: usize) -> Sample {
        Sample::new(SampleId(id), vec![0.1 * id as f64, 1.0], vec![1, 0, 0], label).unwrap()
    }

    #[test]
    fn softmax_scores_of_uniform_predictor() {
        let data: Vec<Sample> = (0..6).map(|i| sample(i, (i % 2) as usize)).collect();
        let out = softmax_detector(&constant_model(), &data, &data).unwrap();
        assert!(out.scores.iter().all(|&s| s == 0.5));
    }

    /// Predictor with logits (0, w * c0) over a single concept; the concept
    /// head is the bias only, so each sample's confidence is set by hand.
    #[test]
    fn softmax_auroc_on_crafted_instance() {
        let mut b = BottleneckModel::zeros(1, 1, 1);
        b.hidden.weights = vec![1.0];
        b.concept_head.weights = vec![1.0];
        let mut p = PredictorModel::zeros(1, 2);
        p.linear.weights = vec![0.0, 4.0];
        p.linear.bias = vec![2.0, 0.0];
        let model = CbmModel::new(b, p, 0).unwrap();
        // feature x -> concept sigmoid(x) -> logits (2, 4 sigmoid(x))
        let xs: [f64; 6] = [-3.0, -1.0, 0.0, 0.2, 1.0, 3.0];
        let labels = [0, 1, 0, 1, 1, 0];
        let data: Vec<Sample> = xs
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&x, y))| Sample::new(SampleId(i as u64), vec![x.max(0.0)], vec![0], y).unwrap())
            .collect();
        // ReLU clips the negative inputs to 0, so concepts are
        // [0.5, 0.5, 0.5, 0.55, 0.73, 0.95], logit gaps 4c - 2 = [0, 0, 0, 0.2, 0.92, 1.8]
        // predictions [0, 0, 0, 1, 1, 1] (ties -> class 0); mistakes at 1, 5
        // scores 1 - max prob: [0.5, 0.5, 0.5, s3, s4, s5] with s3 > s4 > s5
        // positive 1 (0.5) vs negatives {0, 2 (0.5 ties), 3? no: 3 is correct}
        let out = softmax_detector(&model, &data, &data).unwrap();
        let wrong: Vec<bool> = data
            .iter()
            .map(|x| model.predict(x).unwrap().label != x.label_true)
            .collect();
        assert_eq!(wrong, vec![false, true, false, false, false, true]);
        // negatives: scores 0.5, 0.5, s3, s4; positives: 0.5, s5
        // positive 0.5: ties 0.5, 0.5 (2 x 0.5), beats s3, s4 (2) -> 3
        // positive s5: loses to all -> 0
        assert_eq!(auroc(&out.scores, &wrong).unwrap(), 3.0 / 8.0);
        assert_eq!(auroc_pairs(&out.scores, &wrong), 3.0 / 8.0);
    }

    #[test]
    fn combination_modes() {
        let a = DetectorOutput::thresholded(vec![0.1, 0.5, 0.9, 0.7], 0.6);
        let b = DetectorOutput::thresholded(vec![3.0, 1.0, 2.0, 0.0], 1.5);
        let and = combined_detector(&a, &b, CombineMode::FullAgreement).unwrap();
        let or = combined_detector(&a, &b, CombineMode::Partial).unwrap();
        for i in 0..4 {
            assert!(!and.decisions[i] || (a.decisions[i] && b.decisions[i]));
            assert!(or.decisions[i] || !(a.decisions[i] || b.decisions[i]));
        }
        assert_eq!(and.decisions, vec![false, false, true, false]);
        assert_eq!(or.decisions, vec![true, false, true, true]);

        for mode in [CombineMode::FullAgreement, CombineMode::Partial] {
            let same = combined_detector(&a, &a, mode).unwrap();
            assert_eq!(same.decisions, a.decisions);
            assert_eq!(same.scores, rank_normalize(&a.scores));
        }
        let labels = [true, false, true, true];
        assert_eq!(select_combine_mode(&a, &b, &labels).unwrap(), CombineMode::Partial);
        assert!(combined_detector(&a, &DetectorOutput::thresholded(vec![1.0], 0.0), CombineMode::Partial).is_err());
    }

    fn scored_instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..12).prop_map(|v| f64::from(v) / 4.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting((scores, labels) in scored_instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc_pairs(&scores, &labels));
        }

        #[test]
        fn auroc_invariant_under_monotone_transform((scores, labels) in scored_instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&moved, &labels).unwrap());
        }

        #[test]
        fn auroc_flips_with_negated_scores(
            labels in proptest::collection::vec(any::<bool>(), 2..50),
            seed in any::<u64>(),
        ) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = labels.iter().map(|_| rng.random()).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let total = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nri_invariant_under_affine_rescaling(
            base in 0.0..0.9f64, gap in 0.01..0.5f64, frac in 0.0..1.0f64,
            scale in 0.1..10.0f64, shift in -5.0..5.0f64,
        ) {
            let max = base + gap;
            let acc = base + frac * gap;
            let f = |v: f64| scale * v + shift;
            let a = nri(acc, base, max).value().unwrap();
            let b = nri(f(acc), f(base), f(max)).value().unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
