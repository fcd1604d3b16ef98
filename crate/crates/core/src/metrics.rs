//! Detection AP (101-point interpolated, COCO threshold sweep) and
//! segmentation IoU.

use serde_json::{json, Map, Value};

use crate::geometry::{box_iou, BBox};

/// One image's scored predictions and ground truths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRecord {
    pub preds: Vec<(f64, BBox)>,
    pub gts: Vec<BBox>,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Area under the interpolated precision/recall curve at IoU ≥ `tau`.
pub fn ap_at_threshold(records: &[EvalRecord], tau: f64) -> f64 {
    let total_gts: usize = records.iter().map(|r| r.gts.len()).sum();
    if total_gts == 0 {
        log::warn!("average precision requested with no ground truths; reporting 0");
        return 0.0;
    }
    let mut ranked: Vec<(f64, usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(img, r)| r.preds.iter().enumerate().map(move |(k, p)| (p.0, img, k)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut taken: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gts.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (rank, &(_, img, k)) in ranked.iter().enumerate() {
        let pred = &records[img].preds[k].1;
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in records[img].gts.iter().enumerate() {
            if taken[img][j] {
                continue;
            }
            let iou = box_iou(pred, gt);
            if iou >= tau && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[img][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / total_gts as f64);
    }
    // monotone envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while idx < recall.len() && recall[idx] < r {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Mean AP over the threshold sweep.
pub fn map_total(records: &[EvalRecord]) -> f64 {
    let ts = thresholds();
    ts.iter().map(|&t| ap_at_threshold(records, t)).sum::<f64>() / ts.len() as f64
}

/// IoU of class `c` between two label maps; `None` when neither contains `c`.
pub fn seg_iou(pred: &[usize], gt: &[usize], class: usize) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "mask sizes differ");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == class, g == class);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Mean over images of the class IoU, skipping images where it is undefined.
pub fn mean_seg_iou(pairs: &[(Vec<usize>, Vec<usize>)], class: usize) -> Option<f64> {
    let vals: Vec<f64> = pairs.iter().filter_map(|(p, g)| seg_iou(p, g, class)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub map_total: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub per_threshold: Vec<(f64, f64)>,
    pub seg_iou: Option<f64>,
}

impl MetricsReport {
    pub fn compute(records: Option<&[EvalRecord]>, masks: Option<&[(Vec<usize>, Vec<usize>)]>, moving_class: usize) -> Self {
        let mut r = MetricsReport::default();
        if let Some(recs) = records {
            r.per_threshold = thresholds().into_iter().map(|t| (t, ap_at_threshold(recs, t))).collect();
            r.map_total = Some(r.per_threshold.iter().map(|p| p.1).sum::<f64>() / r.per_threshold.len() as f64);
            r.ap50 = Some(r.per_threshold[0].1);
            r.ap75 = Some(r.per_threshold[5].1);
        }
        if let Some(m) = masks {
            r.seg_iou = mean_seg_iou(m, moving_class);
        }
        r
    }

    /// Flat JSON object; absent metrics are the string `"n/a"`.
    pub fn to_json(&self) -> Value {
        let opt = |v: Option<f64>| v.map_or(json!("n/a"), |x| json!(x));
        let mut m = Map::new();
        m.insert("map_total".into(), opt(self.map_total));
        m.insert("ap50".into(), opt(self.ap50));
        m.insert("ap75".into(), opt(self.ap75));
        m.insert("seg_iou".into(), opt(self.seg_iou));
        for (t, ap) in &self.per_threshold {
            m.insert(format!("ap_{}", (t * 100.0).round() as u32), json!(ap));
        }
        Value::Object(m)
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "map_total {}\nap50 {}\nap75 {}\nseg_iou {}\n",
            fmt(self.map_total),
            fmt(self.ap50),
            fmt(self.ap75),
            fmt(self.seg_iou)
        );
        for (t, ap) in &self.per_threshold {
            s.push_str(&format!("ap_{} {ap:.4}\n", (t * 100.0).round() as u32));
        }
        s
    }
}
