//! Classification accuracy and part segmentation IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Correct predictions over all predictions (instances or points).
    pub overall_accuracy: f64,
    /// Mean over classes present in the labels of per-class recall.
    pub class_average_accuracy: f64,
    /// Mean of instance IoUs; segmentation only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_iou: Option<f64>,
    /// Mean instance IoU per shape category; segmentation only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_category_iou: Option<Vec<f64>>,
}

fn check(preds: &[usize], labels: &[usize], classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Input("cannot score an empty dataset".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::Input(format!("class id {bad} outside {classes} classes")));
    }
    Ok(())
}

/// `confusion[label][pred]` counts.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check(preds, labels, classes)?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn classification_metrics(preds: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    let m = confusion(preds, labels, classes)?;
    let correct: usize = (0..classes).map(|c| m[c][c]).sum();
    let recalls: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let total: usize = m[c].iter().sum();
            (total > 0).then(|| m[c][c] as f64 / total as f64)
        })
        .collect();
    Ok(Metrics {
        overall_accuracy: correct as f64 / labels.len() as f64,
        class_average_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        mean_iou: None,
        per_category_iou: None,
    })
}

/// Mean IoU over `parts` part ids for one shape; a part absent from both
/// prediction and ground truth scores 1.
pub fn instance_iou(preds: &[usize], labels: &[usize], parts: usize) -> Result<f64> {
    check(preds, labels, parts)?;
    let total: f64 = (0..parts)
        .map(|part| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &l) in preds.iter().zip(labels) {
                inter += (p == part && l == part) as usize;
                union += (p == part || l == part) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / parts as f64)
}

/// One segmented shape: its category and per-point predicted/true parts.
#[derive(Debug, Clone)]
pub struct SegInstance<'a> {
    pub category: usize,
    pub preds: &'a [usize],
    pub labels: &'a [usize],
}

/// Point accuracy plus instance-averaged IoU, overall and per category.
pub fn segmentation_metrics(instances: &[SegInstance<'_>], parts: usize, categories: usize) -> Result<Metrics> {
    if instances.is_empty() {
        return Err(Error::Input("cannot score an empty dataset".into()));
    }
    let mut all_p = Vec::new();
    let mut all_l = Vec::new();
    let mut ious = Vec::with_capacity(instances.len());
    let mut per_cat = vec![Vec::new(); categories];
    for inst in instances {
        if inst.category >= categories {
            return Err(Error::Input(format!("category {} outside {categories}", inst.category)));
        }
        let iou = instance_iou(inst.preds, inst.labels, parts)?;
        ious.push(iou);
        per_cat[inst.category].push(iou);
        all_p.extend_from_slice(inst.preds);
        all_l.extend_from_slice(inst.labels);
    }
    let point = classification_metrics(&all_p, &all_l, parts)?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(Metrics {
        mean_iou: Some(mean(&ious)),
        per_category_iou: Some(per_cat.iter().map(|v| mean(v)).collect()),
        ..point
    })
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: PartialOrd + Copy>(values: &[T], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}
