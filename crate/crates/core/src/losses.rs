//! Training objective.
//!
//! Spatial: L1 and generalized IoU between the supervised query's box and the
//! ground truth, on frames inside the annotated interval only. Temporal: KL
//! divergence from Gaussian heatmaps centered on the true start and end to the
//! predicted distributions. A binary confidence term teaches the per-query
//! score which query to trust at inference.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, QueryAssignment};
use crate::error::{Error, Result};
use crate::heads::TemporalDistributions;
use crate::types::{BoundingBox, GroundingAnnotation, TemporalInterval};

/// Floor applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean absolute difference over the four coordinates of every box pair.
pub fn l1_loss(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            p.to_array()
                .iter()
                .zip(g.to_array())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(sum / (4 * pred.len()) as f64)
}

/// Generalized IoU: IoU minus the fraction of the smallest enclosing box not
/// covered by the union.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enclosing - union) / enclosing
}

/// Mean of `1 - GIoU` over box pairs, in `[0, 2]`.
pub fn giou_loss(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64> {
    check_pairs(pred, gt)?;
    if let Some(g) = gt.iter().find(|g| g.area() <= 0.0) {
        return Err(Error::InvalidBox(format!("zero-area ground truth {g:?}")));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| 1.0 - giou(p, g)).sum();
    Ok(sum / pred.len() as f64)
}

fn check_pairs(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::InvalidInterval(
            "no frames to compare boxes on".into(),
        ));
    }
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted boxes for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Normalized Gaussian targets peaked at the interval's start and end.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHeatmaps {
    pub pi_s: Vec<f64>,
    pub pi_e: Vec<f64>,
}

pub fn gaussian(center: usize, num_frames: usize, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..num_frames)
        .map(|t| {
            let d = t as f64 - center as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

pub fn make_heatmaps(
    interval: TemporalInterval,
    num_frames: usize,
    sigma: f64,
) -> Result<GaussianHeatmaps> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "heatmap sigma must be positive, got {sigma}"
        )));
    }
    interval.check_within(num_frames)?;
    Ok(GaussianHeatmaps {
        pi_s: gaussian(interval.start(), num_frames, sigma),
        pi_e: gaussian(interval.end(), num_frames, sigma),
    })
}

/// `KL(target ‖ pred) = Σ π log(π / τ)`, with both arguments floored inside
/// the logarithm. Terms with zero target mass contribute nothing.
pub fn kl_divergence(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.max(LOG_FLOOR).ln() - q.max(LOG_FLOOR).ln()))
        .sum()
}

/// `(KL start, KL end)`.
pub fn temporal_kl_loss(
    pred: &TemporalDistributions,
    target: &GaussianHeatmaps,
) -> Result<(f64, f64)> {
    if pred.num_frames() != target.pi_s.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames for {} target frames",
            pred.num_frames(),
            target.pi_s.len()
        )));
    }
    Ok((
        kl_divergence(&target.pi_s, &pred.tau_s),
        kl_divergence(&target.pi_e, &pred.tau_e),
    ))
}

/// Corners `[N, 4]` of center-format boxes `[N, 4]`.
fn tensor_corners(b: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let cx = b.narrow(1, 0, 1)?;
    let cy = b.narrow(1, 1, 1)?;
    let hw = (b.narrow(1, 2, 1)? * 0.5)?;
    let hh = (b.narrow(1, 3, 1)? * 0.5)?;
    Ok(((&cx - &hw)?, (&cy - &hh)?, (cx + hw)?, (cy + hh)?))
}

/// Per-pair generalized IoU of center-format boxes `[N, 4]` → `[N]`.
pub fn giou_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (px1, py1, px2, py2) = tensor_corners(pred)?;
    let (gx1, gy1, gx2, gy2) = tensor_corners(gt)?;
    let iw = (px2.minimum(&gx2)? - px1.maximum(&gx1)?)?.relu()?;
    let ih = (py2.minimum(&gy2)? - py1.maximum(&gy1)?)?.relu()?;
    let inter = (iw * ih)?;
    let pa = ((&px2 - &px1)? * (&py2 - &py1)?)?;
    let ga = ((&gx2 - &gx1)? * (&gy2 - &gy1)?)?;
    let union = ((pa + ga)? - &inter)?;
    let cw = (px2.maximum(&gx2)? - px1.minimum(&gx1)?)?;
    let ch = (py2.maximum(&gy2)? - py1.minimum(&gy1)?)?;
    let enclosing = (cw * ch)?;
    let iou = (inter / &union)?;
    let slack = ((&enclosing - &union)? / &enclosing)?;
    Ok((iou - slack)?.squeeze(1)?)
}

/// KL divergence from a fixed target `[T]` to predicted probabilities `[T]`.
pub fn kl_tensor(target: &[f64], pred: &Tensor) -> Result<Tensor> {
    let device = pred.device();
    let dtype = pred.dtype();
    let log_target: Vec<f64> = target.iter().map(|p| p.max(LOG_FLOOR).ln()).collect();
    let pi = Tensor::from_slice(target, target.len(), device)?.to_dtype(dtype)?;
    let log_pi = Tensor::from_vec(log_target, target.len(), device)?.to_dtype(dtype)?;
    let log_pred = pred.maximum(LOG_FLOOR)?.log()?;
    Ok((pi * (log_pi - log_pred)?)?.sum_all()?)
}

/// Mean binary cross-entropy with logits, computed stably.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((logits.relu()? - (logits * targets)?)? + softplus)?;
    Ok(loss.mean_all()?)
}

/// Predictions of one decoder layer, as consumed by the loss.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    /// `[T, K, 4]`
    pub boxes: Tensor,
    /// `[T, K]`
    pub confidence_logits: Tensor,
    /// `[T, 2]` start/end probabilities (softmax over frames).
    pub temporal: Tensor,
}

impl LayerOutputs {
    pub fn distributions(&self) -> Result<TemporalDistributions> {
        TemporalDistributions::from_tensor(&self.temporal)
    }
}

/// Loss weights and the rule picking the supervised query of each frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_conf: f64,
    pub lambda_relevance: f64,
    pub sigma: f64,
    pub assignment: QueryAssignment,
}

impl From<&ModelConfig> for LossSettings {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            lambda_l1: cfg.lambda_l1,
            lambda_giou: cfg.lambda_giou,
            lambda_conf: cfg.lambda_conf,
            lambda_relevance: cfg.lambda_relevance,
            sigma: cfg.sigma,
            assignment: cfg.query_assignment,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub l1: f64,
    pub giou: f64,
    pub confidence: f64,
    pub kl_start: f64,
    pub kl_end: f64,
    pub total: f64,
}

/// Loss components summed over decoder layers, plus the per-layer breakdown.
/// `total = λ_L1·l1 + λ_GIoU·giou + λ_conf·confidence + kl_start + kl_end`,
/// plus `λ_rel·relevance` when the relevance term is included.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub giou: f64,
    pub confidence: f64,
    pub kl_start: f64,
    pub kl_end: f64,
    #[serde(default)]
    pub relevance: f64,
    pub total: f64,
    pub layers: Vec<LayerLoss>,
}

/// Supervised query per frame of the interval.
pub fn assign_queries(
    boxes: &[Vec<[f64; 4]>],
    confidence: &[Vec<f64>],
    gt: &[BoundingBox],
    settings: &LossSettings,
) -> Result<Vec<usize>> {
    boxes
        .iter()
        .zip(confidence)
        .zip(gt)
        .map(|((frame_boxes, frame_conf), g)| {
            let cost = |q: usize| -> Result<f64> {
                Ok(match settings.assignment {
                    QueryAssignment::HighestConfidence => -frame_conf[q],
                    QueryAssignment::MinCost => {
                        let [cx, cy, w, h] = frame_boxes[q];
                        let p = BoundingBox {
                            cx,
                            cy,
                            w: w.max(1e-9),
                            h: h.max(1e-9),
                        };
                        settings.lambda_l1 * l1_loss(&[p], std::slice::from_ref(g))?
                            + settings.lambda_giou * (1.0 - giou(&p, g))
                    }
                })
            };
            let mut best = 0;
            let mut best_cost = cost(0)?;
            for q in 1..frame_boxes.len() {
                let c = cost(q)?;
                if c < best_cost {
                    best = q;
                    best_cost = c;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Loss of one layer as a differentiable scalar plus its breakdown.
pub fn layer_loss(
    out: &LayerOutputs,
    ann: &GroundingAnnotation,
    settings: &LossSettings,
) -> Result<(Tensor, LayerLoss)> {
    let (t, k, _) = out.boxes.dims3()?;
    let interval = ann.interval();
    interval.check_within(t)?;
    let device = out.boxes.device();
    let dtype = out.boxes.dtype();

    let frames: Vec<usize> = interval.frames().collect();
    let gt: Vec<BoundingBox> = frames
        .iter()
        .map(|f| {
            ann.box_at(*f)
                .copied()
                .ok_or_else(|| Error::Data(format!("no ground-truth box at frame {f}")))
        })
        .collect::<Result<_>>()?;

    let all_boxes: Vec<Vec<Vec<f64>>> = out.boxes.to_dtype(DType::F64)?.to_vec3()?;
    let all_conf: Vec<Vec<f64>> = out.confidence_logits.to_dtype(DType::F64)?.to_vec2()?;
    let frame_boxes: Vec<Vec<[f64; 4]>> = frames
        .iter()
        .map(|&f| {
            all_boxes[f]
                .iter()
                .map(|b| [b[0], b[1], b[2], b[3]])
                .collect()
        })
        .collect();
    let frame_conf: Vec<Vec<f64>> = frames.iter().map(|&f| all_conf[f].clone()).collect();
    let chosen = assign_queries(&frame_boxes, &frame_conf, &gt, settings)?;

    let index: Vec<u32> = frames
        .iter()
        .zip(&chosen)
        .map(|(&f, &q)| (f * k + q) as u32)
        .collect();
    let n = index.len();
    let index = Tensor::from_vec(index, n, device)?;
    let pred = out.boxes.reshape((t * k, 4))?.index_select(&index, 0)?;
    let gt_flat: Vec<f64> = gt.iter().flat_map(|b| b.to_array()).collect();
    let gt_t = Tensor::from_vec(gt_flat, (n, 4), device)?.to_dtype(dtype)?;

    let l1 = (&pred - &gt_t)?.abs()?.mean_all()?;
    let giou = (1.0 - giou_tensor(&pred, &gt_t)?)?.mean_all()?;

    let mut conf_target = vec![0.0; t * k];
    for (&f, &q) in frames.iter().zip(&chosen) {
        conf_target[f * k + q] = 1.0;
    }
    let conf_target = Tensor::from_vec(conf_target, (t, k), device)?.to_dtype(dtype)?;
    let confidence = bce_with_logits(&out.confidence_logits, &conf_target)?;

    let heat = make_heatmaps(interval, t, settings.sigma)?;
    let kl_start = kl_tensor(&heat.pi_s, &out.temporal.narrow(1, 0, 1)?.squeeze(1)?)?;
    let kl_end = kl_tensor(&heat.pi_e, &out.temporal.narrow(1, 1, 1)?.squeeze(1)?)?;

    let total = ((((&l1 * settings.lambda_l1)? + (&giou * settings.lambda_giou)?)?
        + (&confidence * settings.lambda_conf)?)?
        + (&kl_start + &kl_end)?)?;

    let scalar = |x: &Tensor| -> Result<f64> { Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let report = LayerLoss {
        l1: scalar(&l1)?,
        giou: scalar(&giou)?,
        confidence: scalar(&confidence)?,
        kl_start: scalar(&kl_start)?,
        kl_end: scalar(&kl_end)?,
        total: scalar(&total)?,
    };
    Ok((total, report))
}

/// Sum of every layer's loss with equal weights.
pub fn total_loss(
    outputs: &[LayerOutputs],
    ann: &GroundingAnnotation,
    settings: &LossSettings,
) -> Result<(Tensor, LossReport)> {
    let mut total: Option<Tensor> = None;
    let mut report = LossReport::default();
    for out in outputs {
        let (loss, layer) = layer_loss(out, ann, settings)?;
        total = Some(match total {
            None => loss,
            Some(acc) => (acc + loss)?,
        });
        report.l1 += layer.l1;
        report.giou += layer.giou;
        report.confidence += layer.confidence;
        report.kl_start += layer.kl_start;
        report.kl_end += layer.kl_end;
        report.total += layer.total;
        report.layers.push(layer);
    }
    let total = total.ok_or_else(|| Error::Config("no decoder outputs to supervise".into()))?;
    Ok((total, report))
}

/// Per position of every frame `[T·S]`: 1 where the cell lies on the target
/// (its center inside the box, or the box center inside the cell), else 0.
/// Frames outside the annotated interval are all 0.
pub fn relevance_targets(
    level_shapes: &[(usize, usize)],
    ann: &GroundingAnnotation,
    num_frames: usize,
) -> Vec<f64> {
    let s: usize = level_shapes.iter().map(|(h, w)| h * w).sum();
    let mut targets = vec![0.0; num_frames * s];
    for (&t, b) in ann.boxes() {
        if t >= num_frames {
            continue;
        }
        let mut offset = t * s;
        for &(h, w) in level_shapes {
            let (bc, br) = (
                ((b.cx * w as f64) as usize).min(w - 1),
                ((b.cy * h as f64) as usize).min(h - 1),
            );
            for row in 0..h {
                for col in 0..w {
                    let (x, y) = ((col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64);
                    if b.contains_point(x, y) || (row, col) == (br, bc) {
                        targets[offset + row * w + col] = 1.0;
                    }
                }
            }
            offset += h * w;
        }
    }
    targets
}

/// Class-balanced binary cross-entropy of relevance scores `[T, S]` (read
/// as logits after dividing by `sqrt(d_model)`): the mean over positive
/// positions and the mean over negative ones, averaged.
pub fn relevance_loss(scores: &Tensor, targets: &[f64], d_model: usize) -> Result<Tensor> {
    let n = targets.len();
    if scores.elem_count() != n {
        return Err(Error::Shape(format!(
            "{} relevance scores for {n} targets",
            scores.elem_count()
        )));
    }
    let device = scores.device();
    let dtype = scores.dtype();
    let logits = (scores.flatten_all()? / (d_model as f64).sqrt())?;
    let pos = targets.iter().filter(|&&t| t > 0.5).count();
    let neg = n - pos;
    // with only one class present its mean is the whole loss
    let classes = if pos == 0 || neg == 0 { 1.0 } else { 2.0 };
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| 1.0 / (classes * if t > 0.5 { pos } else { neg } as f64))
        .collect();
    let w = Tensor::from_vec(weights, n, device)?.to_dtype(dtype)?;
    let y = Tensor::from_slice(targets, n, device)?.to_dtype(dtype)?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((logits.relu()? - (&logits * &y)?)? + softplus)?;
    Ok((per * w)?.sum_all()?)
}

/// Everything the model is trained on: the per-layer losses and the
/// relevance term.
pub fn training_loss(
    output: &crate::model::ModelOutput,
    ann: &GroundingAnnotation,
    settings: &LossSettings,
    d_model: usize,
) -> Result<(Tensor, LossReport)> {
    let (total, mut report) = total_loss(&output.layers, ann, settings)?;
    if settings.lambda_relevance == 0.0 {
        return Ok((total, report));
    }
    let (t, _) = output.relevance.dims2()?;
    let targets = relevance_targets(&output.level_shapes, ann, t);
    let rel = relevance_loss(&output.relevance, &targets, d_model)?;
    report.relevance = rel.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    report.total += settings.lambda_relevance * report.relevance;
    Ok(((total + (rel * settings.lambda_relevance)?)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn l1_hand_value() {
        let v = l1_loss(&[b(0.5, 0.5, 0.5, 0.5)], &[b(0.5, 0.5, 0.3, 0.3)]).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        assert!(l1_loss(&[], &[]).is_err());
    }

    #[test]
    fn giou_disjoint_corners() {
        let p = BoundingBox::from_corners(0.0, 0.0, 0.5, 0.5).unwrap();
        let g = BoundingBox::from_corners(0.5, 0.5, 1.0, 1.0).unwrap();
        assert!((giou(&p, &g) + 0.5).abs() < 1e-12);
        assert!((giou_loss(&[p], &[g]).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(giou_loss(&[g], &[g]).unwrap(), 0.0);
    }

    #[test]
    fn heatmap_formula() {
        let h = make_heatmaps(TemporalInterval::new(2, 4, true).unwrap(), 5, 1.0).unwrap();
        let raw: Vec<f64> = (0..5)
            .map(|t| (-((t as f64 - 2.0).powi(2)) / 2.0).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        for t in 0..5 {
            assert!((h.pi_s[t] - raw[t] / z).abs() < 1e-9);
        }
        assert!((h.pi_s[1] - h.pi_s[3]).abs() < 1e-15);
    }

    #[test]
    fn kl_hand_value() {
        let v = kl_divergence(&[0.5, 0.5], &[0.75, 0.25]);
        assert!((v - 0.14384).abs() < 1e-4);
        assert!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).abs() < 1e-12);
    }
}
