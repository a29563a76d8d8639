use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::labels::{derive_counts, round_counts, CountVector, SlotLabels, ACTIVITIES, CLASSES, USERS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]` over all (sample, slot) pairs.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingMetrics {
    pub mae: f64,
    /// `None` when the truths are constant.
    pub r2: Option<f64>,
    pub cell_accuracy: f64,
    pub exact_match: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion matrix over the 10 slot classes.
pub fn confusion_matrix(predictions: &[SlotLabels], truths: &[SlotLabels]) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut cm = vec![vec![0u64; CLASSES]; CLASSES];
    for (p, t) in predictions.iter().zip(truths) {
        for (pc, tc) in p.class_indices().into_iter().zip(t.class_indices()) {
            cm[tc][pc] += 1;
        }
    }
    Ok(cm)
}

/// Metrics from a confusion matrix. `classes` selects which classes enter the
/// macro averages; accuracy always uses every cell.
pub fn metrics_from_confusion(cm: &[Vec<u64>], classes: &[usize]) -> ClassificationMetrics {
    let k = cm.len();
    let total: u64 = cm.iter().flatten().sum();
    let correct: u64 = (0..k).map(|c| cm[c][c]).sum();
    let mut precision = vec![0.0; k];
    let mut recall = vec![0.0; k];
    let mut f1 = vec![0.0; k];
    for c in 0..k {
        let tp = cm[c][c];
        let predicted: u64 = (0..k).map(|t| cm[t][c]).sum();
        let actual: u64 = cm[c].iter().sum();
        precision[c] = ratio(tp, predicted);
        recall[c] = ratio(tp, actual);
        f1[c] = ratio(2 * tp, predicted + actual);
    }
    let avg = |v: &[f64]| classes.iter().map(|&c| v[c]).sum::<f64>() / classes.len().max(1) as f64;
    ClassificationMetrics {
        accuracy: ratio(correct, total),
        macro_precision: avg(&precision),
        macro_recall: avg(&recall),
        macro_f1: avg(&f1),
        per_class_f1: f1,
        confusion: cm.to_vec(),
    }
}

/// Pools every (sample, slot) pair into one 10-class problem. Classes with no
/// predicted (or no true) instances score 0 precision (or recall).
pub fn classification_metrics(
    predictions: &[SlotLabels],
    truths: &[SlotLabels],
    include_absent: bool,
) -> Result<ClassificationMetrics> {
    let cm = confusion_matrix(predictions, truths)?;
    let classes: Vec<usize> = (if include_absent { 0 } else { 1 }..CLASSES).collect();
    Ok(metrics_from_confusion(&cm, &classes))
}

fn check_counts(predicted: &[[f64; ACTIVITIES]], truths: &[CountVector]) -> Result<()> {
    if predicted.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} truths",
            predicted.len(),
            truths.len()
        )));
    }
    if predicted.iter().flatten().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract("predicted counts must be non-negative".into()));
    }
    Ok(())
}

/// MAE and R² on continuous predictions over all `n·9` cells; cell accuracy
/// and exact match after rounding.
pub fn counting_metrics(predicted: &[[f64; ACTIVITIES]], truths: &[CountVector]) -> Result<CountingMetrics> {
    check_counts(predicted, truths)?;
    if truths.is_empty() {
        return Err(Error::Contract("counting metrics need at least one sample".into()));
    }
    let cells = (truths.len() * ACTIVITIES) as f64;
    let mean = truths.iter().flat_map(|t| t.0).map(f64::from).sum::<f64>() / cells;
    let (mut abs, mut ss_res, mut ss_tot) = (0.0, 0.0, 0.0);
    let (mut cell_hits, mut exact) = (0usize, 0usize);
    for (p, t) in predicted.iter().zip(truths) {
        let rounded = round_counts(p)?;
        let mut all = true;
        for k in 0..ACTIVITIES {
            let c = t.0[k] as f64;
            abs += (p[k] - c).abs();
            ss_res += (p[k] - c).powi(2);
            ss_tot += (c - mean).powi(2);
            if rounded.0[k] == t.0[k] {
                cell_hits += 1;
            } else {
                all = false;
            }
        }
        exact += all as usize;
    }
    Ok(CountingMetrics {
        mae: abs / cells,
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        cell_accuracy: cell_hits as f64 / cells,
        exact_match: exact as f64 / truths.len() as f64,
    })
}

/// MAE restricted to each activity column.
pub fn per_activity_mae(predicted: &[[f64; ACTIVITIES]], truths: &[CountVector]) -> Result<[f64; ACTIVITIES]> {
    check_counts(predicted, truths)?;
    let mut out = [0.0; ACTIVITIES];
    for (p, t) in predicted.iter().zip(truths) {
        for k in 0..ACTIVITIES {
            out[k] += (p[k] - t.0[k] as f64).abs();
        }
    }
    let n = truths.len().max(1) as f64;
    Ok(out.map(|v| v / n))
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub n: usize,
    /// Macro-F1 (dependent task) or MAE (counting task) over the group.
    pub value: f64,
    /// SD of the per-sample metric across the group's samples.
    pub sd: f64,
}

/// Macro-F1 of one sample's six slots over the classes present in either its
/// truth or its prediction.
pub fn sample_macro_f1(prediction: &SlotLabels, truth: &SlotLabels) -> f64 {
    let cm = confusion_matrix(std::slice::from_ref(prediction), std::slice::from_ref(truth)).expect("equal lengths");
    let present: Vec<usize> = (0..CLASSES)
        .filter(|&c| cm[c].iter().sum::<u64>() > 0 || (0..CLASSES).any(|t| cm[t][c] > 0))
        .collect();
    metrics_from_confusion(&cm, &present).macro_f1
}

/// Groups samples by true number of active users (groups without samples are
/// omitted) and reports pooled macro-F1 with the SD of per-sample macro-F1.
pub fn per_user_count_classification(
    predictions: &[SlotLabels],
    truths: &[SlotLabels],
    include_absent: bool,
) -> Result<BTreeMap<usize, GroupMetric>> {
    confusion_matrix(predictions, truths)?;
    let mut out = BTreeMap::new();
    for k in 0..=USERS {
        let idx: Vec<usize> = (0..truths.len()).filter(|&i| truths[i].occupancy() == k).collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<SlotLabels> = idx.iter().map(|&i| predictions[i]).collect();
        let t: Vec<SlotLabels> = idx.iter().map(|&i| truths[i]).collect();
        let pooled = classification_metrics(&p, &t, include_absent)?.macro_f1;
        let per_sample: Vec<f64> = p.iter().zip(&t).map(|(a, b)| sample_macro_f1(a, b)).collect();
        out.insert(
            k,
            GroupMetric {
                n: idx.len(),
                value: pooled,
                sd: mean_sd(&per_sample).1,
            },
        );
    }
    Ok(out)
}

/// Groups samples by true number of active users and reports MAE with the SD
/// of per-sample MAE.
pub fn per_user_count_counting(
    predicted: &[[f64; ACTIVITIES]],
    truths: &[CountVector],
    annotations: &[SlotLabels],
) -> Result<BTreeMap<usize, GroupMetric>> {
    check_counts(predicted, truths)?;
    if annotations.len() != truths.len() {
        return Err(Error::Contract("annotations and truths differ in length".into()));
    }
    let mut out = BTreeMap::new();
    for k in 0..=USERS {
        let per_sample: Vec<f64> = (0..truths.len())
            .filter(|&i| annotations[i].occupancy() == k)
            .map(|i| (0..ACTIVITIES).map(|c| (predicted[i][c] - truths[i].0[c] as f64).abs()).sum::<f64>() / ACTIVITIES as f64)
            .collect();
        if per_sample.is_empty() {
            continue;
        }
        let (mean, sd) = mean_sd(&per_sample);
        out.insert(
            k,
            GroupMetric {
                n: per_sample.len(),
                value: mean,
                sd,
            },
        );
    }
    Ok(out)
}

/// Ground-truth counts for a set of annotations.
pub fn truth_counts(annotations: &[SlotLabels]) -> Vec<CountVector> {
    annotations.iter().map(derive_counts).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Activity;

    #[test]
    fn all_absent_predictor_inflates_accuracy() {
        // 25 samples × 6 slots = 150 cells, 96 of them ABSENT (64%)
        let mut truths = Vec::new();
        let mut present = 150 - 96;
        for _ in 0..25 {
            let mut s = SlotLabels::empty();
            for u in 0..USERS {
                if present > 0 && u < 3 {
                    s.0[u] = Some(Activity::Walk);
                    present -= 1;
                }
            }
            truths.push(s);
        }
        let preds = vec![SlotLabels::empty(); 25];
        let m = classification_metrics(&preds, &truths, true).unwrap();
        assert!((m.accuracy - 0.64).abs() < 1e-12);
        // F1 of ABSENT = 2·96/(150+96), every other class 0
        let f1_absent = 2.0 * 96.0 / 246.0;
        assert!((m.macro_f1 - f1_absent / 10.0).abs() < 1e-12);
        assert!(m.macro_f1 < 0.10);
    }

    #[test]
    fn perfect_predictions() {
        let mut s = SlotLabels::empty();
        s.0[2] = Some(Activity::Jump);
        let m = classification_metrics(&[s, SlotLabels::empty()], &[s, SlotLabels::empty()], true).unwrap();
        assert_eq!(m.accuracy, 1.0);
        // classes never seen score 0, so macro-F1 over all 10 is 0.2 here
        assert!((m.macro_f1 - 0.2).abs() < 1e-12);
        let t = truth_counts(&[s]);
        let p = [t[0].0.map(f64::from)];
        let c = counting_metrics(&p, &t).unwrap();
        assert_eq!((c.mae, c.r2, c.cell_accuracy, c.exact_match), (0.0, Some(1.0), 1.0, 1.0));
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let t = vec![CountVector([1, 0, 0, 2, 0, 0, 0, 0, 0]), CountVector([0, 0, 1, 0, 0, 0, 0, 0, 1])];
        let mean = 5.0 / 18.0;
        let p = vec![[mean; ACTIVITIES]; 2];
        let c = counting_metrics(&p, &t).unwrap();
        assert!(c.r2.unwrap().abs() < 1e-12);
        let constant = vec![CountVector([1; ACTIVITIES]); 2];
        assert_eq!(counting_metrics(&p, &constant).unwrap().r2, None);
    }

    #[test]
    fn single_column_error() {
        let t = vec![CountVector::default(); 4];
        let mut p = vec![[0.0; ACTIVITIES]; 4];
        p[2][5] = 0.5;
        let m = per_activity_mae(&p, &t).unwrap();
        for k in 0..ACTIVITIES {
            assert_eq!(m[k], if k == 5 { 0.5 / 4.0 } else { 0.0 });
        }
    }

    #[test]
    fn empty_groups_are_omitted() {
        let mut s = SlotLabels::empty();
        s.0[0] = Some(Activity::Wave);
        let g = per_user_count_classification(&[s, s], &[s, s], true).unwrap();
        assert_eq!(g.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(g[&1].n, 2);
        assert_eq!(g[&1].sd, 0.0);
    }

    #[test]
    fn sd_uses_n_minus_one() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
