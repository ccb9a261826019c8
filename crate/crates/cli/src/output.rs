//! CSV rows and overlay images.

use advseg::eval::{boundary, ConfusionCounts, MetricsReport, TRIMAP_WIDTHS};
use advseg::train::{EpochRecord, SplitMetrics};
use advseg::{Result, Tensor};

pub const TRAIN_METRICS_HEADER: &str =
    "variant,split,epoch,dice,trimap_acc_w1,trimap_acc_w2,trimap_acc_w3,trimap_acc_w4,trimap_acc_w5";

/// Trimap accuracies pool pixels over the whole split; the `pooling` column says so.
pub const EVAL_METRICS_HEADER: &str = "variant,split,metric,width,value,pooling";

pub const PER_SAMPLE_HEADER: &str = "variant,split,sample,tp,fp,fn,tn,dice";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn wide_row(variant: &str, split: &str, epoch: usize, m: &SplitMetrics) -> String {
    let trimap: Vec<String> = m.trimap.iter().map(|&t| opt(t)).collect();
    format!("{variant},{split},{epoch},{},{}", m.dice, trimap.join(","))
}

/// One wide row per scored split of the epoch.
pub fn epoch_rows(variant: &str, r: &EpochRecord) -> Vec<String> {
    let mut rows = Vec::new();
    if let Some(m) = &r.train {
        rows.push(wide_row(variant, "train", r.epoch, m));
    }
    if let Some(m) = &r.test {
        rows.push(wide_row(variant, "test", r.epoch, m));
    }
    rows
}

/// Five trimap rows then the Dice row.
pub fn eval_rows(variant: &str, split: &str, report: &MetricsReport) -> Vec<String> {
    let mut rows: Vec<String> = TRIMAP_WIDTHS
        .iter()
        .zip(report.trimap_accuracy())
        .map(|(w, acc)| format!("{variant},{split},trimap_acc,{w},{},pooled_pixels", opt(acc)))
        .collect();
    rows.push(format!("{variant},{split},dice,,{},pooled_pixels", report.dice()));
    rows
}

pub fn per_sample_rows(variant: &str, split: &str, indices: &[usize], report: &MetricsReport) -> Vec<String> {
    indices
        .iter()
        .zip(&report.per_sample)
        .map(|(i, s)| {
            let ConfusionCounts { tp, fp, fn_, tn } = s.confusion;
            format!("{variant},{split},{i},{tp},{fp},{fn_},{tn},{}", s.confusion.dice())
        })
        .collect()
}

/// The intensity image with the predicted contour (mass pixels on the mask
/// boundary) painted white.
pub fn overlay(intensity: &Tensor, pred: &Tensor) -> Result<Tensor> {
    let (h, w) = pred.hw()?;
    let edge = boundary(pred)?;
    let mut out = intensity.clone().reshape(&[h, w])?;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if edge[i] && pred.data()[i] == 1.0 {
            *v = 1.0;
        }
    }
    Ok(out)
}
