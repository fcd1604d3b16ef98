//! Bipartite detection set loss, per-pixel mask loss and their weighted sum.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::heads::{DetectionOutput, MOVING, NO_OBJECT};
use crate::matching::{build_cost_matrix, hungarian, Assignment, LossWeights};

/// Matched queries: CE(moving) + l1·L1 + giou·(1 − GIoU); unmatched queries:
/// no_object·CE(no-object). Averaged over all queries.
pub fn detection_set_loss(
    g: &mut Graph,
    det: &DetectionOutput,
    gts: &[BBox],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<Var> {
    let n = g.shape(det.logits)[0];
    if assignment.pred_for_gt.len() != gts.len() || assignment.pred_for_gt.iter().any(|&i| i >= n) {
        return Err(Error::Contract(format!(
            "assignment of {} ground truths does not fit {} predictions and {} targets",
            assignment.pred_for_gt.len(),
            n,
            gts.len()
        )));
    }
    let matched = assignment.gt_for_pred(n);
    let targets: Vec<usize> = matched.iter().map(|m| if m.is_some() { MOVING } else { NO_OBJECT }).collect();
    let weights: Vec<f64> = matched
        .iter()
        .map(|m| if m.is_some() { w.class } else { w.no_object })
        .collect();
    let mut loss = g.cross_entropy_rows(det.logits, &targets, &weights)?;
    if !gts.is_empty() {
        let rows = g.gather_rows(det.boxes, &assignment.pred_for_gt)?;
        let boxes = g.box_loss(rows, gts, w.l1, w.giou)?;
        loss = g.add(loss, boxes)?;
    }
    Ok(g.scale(loss, 1.0 / n.max(1) as f64))
}

/// Builds the cost from the current outputs, matches, and returns the set loss.
pub fn match_and_loss(
    g: &mut Graph,
    det: &DetectionOutput,
    gts: &[BBox],
    w: &LossWeights,
) -> Result<(Var, Assignment)> {
    let preds = det.predictions(g);
    let assignment = hungarian(&build_cost_matrix(&preds, gts, w)?)?;
    Ok((detection_set_loss(g, det, gts, &assignment, w)?, assignment))
}

/// Mean per-pixel cross-entropy of `[N_c × H₁ × W₁]` logits against class indices.
pub fn segmentation_loss(g: &mut Graph, logits: Var, mask: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[1] * s[2] != mask.len() {
        return Err(Error::dim("segmentation_loss", &s, &[mask.len()]));
    }
    let plane = s[1] * s[2];
    let flat = g.reshape(logits, &[s[0], plane])?;
    let per_pixel = g.transpose(flat)?;
    let weights = vec![1.0 / plane as f64; plane];
    g.cross_entropy_rows(per_pixel, mask, &weights)
}

/// `w_det·det + w_seg·seg`, absent terms counting as zero.
pub fn mtl_loss(g: &mut Graph, det: Option<Var>, seg: Option<Var>, w_det: f64, w_seg: f64) -> Result<Var> {
    let terms: Vec<Var> = [(det, w_det), (seg, w_seg)]
        .into_iter()
        .filter_map(|(v, w)| v.map(|v| g.scale(v, w)))
        .collect();
    match terms.as_slice() {
        [] => g.constant_from(&[1], vec![0.0]),
        [a] => Ok(*a),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}
