use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassAccuracy {
    /// Macro average over classes that have at least one item.
    pub mean: f64,
    /// Within-class accuracy, `None` for classes without items.
    pub per_class: Vec<Option<f64>>,
    /// Classes left out of the mean because they have no items.
    pub excluded: Vec<usize>,
}

/// Average per-class accuracy with a breakdown.
pub fn per_class_breakdown(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<PerClassAccuracy> {
    if labels.is_empty() {
        return Err(invalid!("per-class accuracy of an empty set"));
    }
    if preds.len() != labels.len() {
        return Err(invalid!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= num_classes || p >= num_classes {
            return Err(invalid!("class index out of range [0,{num_classes}): pred {p}, label {y}"));
        }
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let excluded: Vec<usize> = (0..num_classes).filter(|&k| total[k] == 0).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(PerClassAccuracy {
        mean,
        per_class,
        excluded,
    })
}

/// Mean over classes of within-class accuracy. Classes with no items are
/// excluded from the mean.
pub fn per_class_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    Ok(per_class_breakdown(preds, labels, num_classes)?.mean)
}
