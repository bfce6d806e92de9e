//! Test-time augmentation over the 4-fold rotation group and the
//! evaluation harness that turns checkpoints + test splits into metric
//! tables and ranked reports.

use crate::error::{LsclError, Result};
use crate::metrics::{
    assd, dice_coefficient, hausdorff, jaccard, minmax_score, LabelMap, MethodScore, MetricRow,
    MetricTable, METRIC_NAMES, STRUCTURE_NAMES,
};
use crate::stylegen::Dataset;
use crate::tensor::Tensor;
use crate::unet::{forward_logits, Model};

/// Plain softmax over the channel axis of [b, c, h, w], by value.
fn softmax_probs(logits: &Tensor) -> Tensor {
    let (b, c, h, w) = (
        logits.shape[0],
        logits.shape[1],
        logits.shape[2],
        logits.shape[3],
    );
    let plane = h * w;
    let mut out = Tensor::zeros(&logits.shape);
    for i in 0..b {
        for px in 0..plane {
            let base = i * c * plane + px;
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(logits.data[base + ch * plane]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (logits.data[base + ch * plane] - m).exp();
                out.data[base + ch * plane] = e;
                z += e;
            }
            for ch in 0..c {
                out.data[base + ch * plane] /= z;
            }
        }
    }
    out
}

/// Single-pass class probabilities for a 1 x h x w image: [c, h, w].
pub fn predict_probs(model: &Model, image: &Tensor) -> Result<Tensor> {
    let batch = Tensor::new(
        vec![1, image.shape[0], image.shape[1], image.shape[2]],
        image.data.clone(),
    );
    let logits = forward_logits(model, &batch)?;
    let probs = softmax_probs(&logits);
    Ok(Tensor::new(
        probs.shape[1..].to_vec(),
        probs.data,
    ))
}

/// TTA prediction: average the softmax outputs of the identity pass and the
/// three quarter-turn rotations (each inverse-rotated back). Requires a
/// square image.
pub fn tta_predict(model: &Model, image: &Tensor) -> Result<Tensor> {
    let (h, w) = (image.shape[1], image.shape[2]);
    if h != w {
        return Err(LsclError::shape(
            "tta_predict",
            format!("image must be square, got {h}x{w}"),
        ));
    }
    let mut acc: Option<Tensor> = None;
    for k in 0..4usize {
        let rotated = image.rot90(k);
        let probs = predict_probs(model, &rotated)?;
        let restored = probs.rot90(4 - k);
        acc = Some(match acc {
            None => restored,
            Some(a) => a.zip(&restored, "tta-acc", |x, y| x + y)?,
        });
    }
    Ok(acc.unwrap().map(|v| v / 4.0))
}

/// Argmax over the channel axis of [c, h, w] -> label map.
pub fn probs_to_labels(probs: &Tensor) -> LabelMap {
    let (c, h, w) = (probs.shape[0], probs.shape[1], probs.shape[2]);
    let plane = h * w;
    let mut data = vec![0u8; plane];
    for px in 0..plane {
        let mut best = 0usize;
        let mut best_v = probs.data[px];
        for ch in 1..c {
            let v = probs.data[ch * plane + px];
            if v > best_v {
                best_v = v;
                best = ch;
            }
        }
        data[px] = best as u8;
    }
    LabelMap { h, w, data }
}

pub fn predict_labels(model: &Model, image: &Tensor, use_tta: bool) -> Result<LabelMap> {
    let probs = if use_tta {
        tta_predict(model, image)?
    } else {
        predict_probs(model, image)?
    };
    Ok(probs_to_labels(&probs))
}

/// Evaluate one model on one test split. Produces per-structure and
/// structure-averaged mean/std rows for each metric, under `method` and the
/// split's vendor labels.
pub fn evaluate(model: &Model, test: &Dataset, use_tta: bool, method: &str) -> Result<MetricTable> {
    if test.samples.is_empty() {
        return Err(LsclError::EmptyDataset);
    }
    // values[vendor][structure][metric] -> per-sample values. Structures are
    // LV, MYO, RV plus the per-sample structure average at index 3.
    let mut vendors: Vec<String> = Vec::new();
    let mut values: Vec<[[Vec<f64>; 4]; 4]> = Vec::new();
    for sample in &test.samples {
        let pred = predict_labels(model, &sample.image, use_tta)?;
        let vendor_idx = match vendors.iter().position(|v| v == &sample.vendor) {
            Some(i) => i,
            None => {
                vendors.push(sample.vendor.clone());
                values.push(Default::default());
                vendors.len() - 1
            }
        };
        let mut per_metric_avg = [0.0f64; 4];
        for (si, class_id) in [1u8, 2, 3].iter().enumerate() {
            let m = [
                dice_coefficient(&pred, &sample.label, *class_id)?,
                jaccard(&pred, &sample.label, *class_id)?,
                hausdorff(&pred, &sample.label, *class_id)?,
                assd(&pred, &sample.label, *class_id)?,
            ];
            for (mi, v) in m.iter().enumerate() {
                values[vendor_idx][si][mi].push(*v);
                per_metric_avg[mi] += v / 3.0;
            }
        }
        for (mi, v) in per_metric_avg.iter().enumerate() {
            values[vendor_idx][3][mi].push(*v);
        }
    }

    let mut table = MetricTable::default();
    for (vi, vendor) in vendors.iter().enumerate() {
        for (si, structure) in STRUCTURE_NAMES.iter().chain(["avg"].iter()).enumerate() {
            for (mi, metric) in METRIC_NAMES.iter().enumerate() {
                let vals = &values[vi][si][mi];
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                table.rows.push(MetricRow {
                    method: method.to_string(),
                    vendor: vendor.clone(),
                    structure: structure.to_string(),
                    metric: metric.to_string(),
                    mean,
                    std: var.sqrt(),
                });
            }
        }
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub table: MetricTable,
    pub scores: Vec<MethodScore>,
    /// Hash of the run configuration (seeds and parameters).
    pub fingerprint: String,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    /// Summary CSV, one row per method: per-vendor DSC/HD mean (std) plus
    /// the three challenge-style scores.
    pub fn to_summary_csv(&self) -> String {
        let methods = self.table.methods();
        let vendors = self.table.vendors_of(&methods[0]);
        let mut out = String::from("method");
        for v in &vendors {
            out.push_str(&format!(
                ",DSC_{v}_mean,DSC_{v}_std,HD_{v}_mean,HD_{v}_std"
            ));
        }
        out.push_str(",DSC_Score,HD_Score,Minmax_Score\n");
        for m in &methods {
            out.push_str(m);
            for v in &vendors {
                let dsc = self.table.get(m, v, "avg", "DSC").unwrap();
                let hd = self.table.get(m, v, "avg", "HD").unwrap();
                out.push_str(&format!(
                    ",{:.4},{:.4},{:.4},{:.4}",
                    dsc.mean, dsc.std, hd.mean, hd.std
                ));
            }
            let s = self.scores.iter().find(|s| &s.method == m).unwrap();
            out.push_str(&format!(
                ",{:.4},{:.4},{:.4}\n",
                s.dsc_score, s.hd_score, s.minmax_score
            ));
        }
        out
    }
}

/// Merge per-method tables, rank them, and stamp the report.
pub fn compare_report(
    tables: &[MetricTable],
    fingerprint: &str,
    wall_clock_secs: f64,
) -> Result<EvalReport> {
    if tables.len() < 2 {
        return Err(LsclError::TooFewMethods(tables.len()));
    }
    let mut merged = MetricTable::default();
    for t in tables {
        merged.merge(t);
    }
    let scores = minmax_score(&merged)?;
    Ok(EvalReport {
        table: merged,
        scores,
        fingerprint: fingerprint.to_string(),
        wall_clock_secs,
    })
}
