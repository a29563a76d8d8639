use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::{
    classification_metrics, counting_metrics, per_activity_mae, per_user_count_classification,
    per_user_count_counting, truth_counts, ClassificationMetrics, CountingMetrics, GroupMetric,
};
use crate::data::SampleSource;
use crate::labels::{decode_identity_dependent, SlotLabels, ACTIVITIES};
use crate::model::{slot_logits, stack_images, Model, Task};
use crate::transform::{preprocess_eval, TransformConfig};
use crate::{Result, Scalar};

/// Model outputs and pooled features for a list of samples, in input order.
pub struct Predictions<T> {
    pub ids: Vec<String>,
    pub annotations: Vec<SlotLabels>,
    pub outputs: Array2<T>,
    pub features: Array2<T>,
}

impl<T: Scalar> Predictions<T> {
    /// Decoded slot labels (dependent task).
    pub fn slot_labels(&self) -> Vec<SlotLabels> {
        slot_logits(&self.outputs)
            .outer_iter()
            .map(|m| decode_identity_dependent(m.view()))
            .collect()
    }

    /// Continuous count predictions (counting task).
    pub fn counts(&self) -> Vec<[f64; ACTIVITIES]> {
        self.outputs
            .outer_iter()
            .map(|r| core::array::from_fn(|k| r[k].to_f64_lossy()))
            .collect()
    }
}

/// Runs the eval-mode pipeline and the model over `ids`.
pub fn predict<T: Scalar>(
    model: &mut Model<T>,
    source: &dyn SampleSource<T>,
    ids: &[String],
    transform: &TransformConfig,
    batch_size: usize,
) -> Result<Predictions<T>> {
    let mut images = Vec::with_capacity(ids.len());
    let mut annotations = Vec::with_capacity(ids.len());
    for id in ids {
        let s = source.load(id)?;
        images.push(preprocess_eval(s.amplitude.view(), transform)?);
        annotations.push(s.annotation);
    }
    Ok(predict_images(model, &images, &annotations, ids, batch_size))
}

/// Runs the model over already prepared `R×R` images.
pub fn predict_images<T: Scalar>(
    model: &mut Model<T>,
    images: &[Array2<T>],
    annotations: &[SlotLabels],
    ids: &[String],
    batch_size: usize,
) -> Predictions<T> {
    let mut outputs = Vec::new();
    let mut features = Vec::new();
    for chunk in images.chunks(batch_size.max(1)) {
        let (z, y) = model.infer(stack_images(chunk));
        features.push(z);
        outputs.push(y);
    }
    let cat = |parts: Vec<Array2<T>>, width: usize| {
        if parts.is_empty() {
            return Array2::zeros((0, width));
        }
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("same widths")
    };
    Predictions {
        ids: ids.to_vec(),
        annotations: annotations.to_vec(),
        outputs: cat(outputs, model.task().output_dim()),
        features: cat(features, model.backbone.feature_dim()),
    }
}

/// Everything reported for one evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub n_samples: usize,
    pub classification: Option<ClassificationMetrics>,
    pub counting: Option<CountingMetrics>,
    pub per_activity_mae: Option<Vec<f64>>,
    pub per_user_count: BTreeMap<usize, GroupMetric>,
}

impl MetricReport {
    /// Macro-F1 for the dependent task, MAE for counting.
    pub fn primary(&self) -> f64 {
        match self.task {
            Task::IdentityDependent => self.classification.as_ref().map_or(f64::NAN, |c| c.macro_f1),
            Task::IdentityAgnostic => self.counting.as_ref().map_or(f64::NAN, |c| c.mae),
        }
    }

    /// Whether `a` is a better primary metric than `b`.
    pub fn better(task: Task, a: f64, b: f64) -> bool {
        match task {
            Task::IdentityDependent => a > b,
            Task::IdentityAgnostic => a < b,
        }
    }

    /// Named scalar metrics, `None` where undefined.
    pub fn scalars(&self) -> BTreeMap<&'static str, Option<f64>> {
        let mut m = BTreeMap::new();
        if let Some(c) = &self.classification {
            m.insert("accuracy", Some(c.accuracy));
            m.insert("macro_precision", Some(c.macro_precision));
            m.insert("macro_recall", Some(c.macro_recall));
            m.insert("macro_f1", Some(c.macro_f1));
        }
        if let Some(c) = &self.counting {
            m.insert("mae", Some(c.mae));
            m.insert("r2", c.r2);
            m.insert("cell_accuracy", Some(c.cell_accuracy));
            m.insert("exact_match", Some(c.exact_match));
        }
        m
    }
}

pub fn evaluate<T: Scalar>(task: Task, predictions: &Predictions<T>, include_absent: bool) -> Result<MetricReport> {
    let truths = &predictions.annotations;
    Ok(match task {
        Task::IdentityDependent => {
            let predicted = predictions.slot_labels();
            MetricReport {
                task,
                n_samples: truths.len(),
                classification: Some(classification_metrics(&predicted, truths, include_absent)?),
                counting: None,
                per_activity_mae: None,
                per_user_count: per_user_count_classification(&predicted, truths, include_absent)?,
            }
        }
        Task::IdentityAgnostic => {
            let predicted = predictions.counts();
            let counts = truth_counts(truths);
            MetricReport {
                task,
                n_samples: truths.len(),
                classification: None,
                counting: Some(counting_metrics(&predicted, &counts)?),
                per_activity_mae: Some(per_activity_mae(&predicted, &counts)?.to_vec()),
                per_user_count: per_user_count_counting(&predicted, &counts, truths)?,
            }
        }
    })
}
