//! Evaluation metrics: temporal IoU, tube IoU, thresholded tube accuracy and
//! the pointing game.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, GroundingAnnotation, SpatioTemporalTube, TemporalInterval};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// Inclusive-frame IoU of two intervals.
pub fn t_iou(pred: TemporalInterval, gt: TemporalInterval) -> f64 {
    let inter_start = pred.start().max(gt.start());
    let inter_end = pred.end().min(gt.end());
    let inter = if inter_end >= inter_start {
        inter_end - inter_start + 1
    } else {
        0
    };
    let union = pred.len() + gt.len() - inter;
    inter as f64 / union as f64
}

/// Sum of per-frame box IoU over the frames both intervals cover, divided by
/// the number of frames either covers.
pub fn v_iou(pred: &SpatioTemporalTube, gt: &GroundingAnnotation) -> f64 {
    let (p, g) = (pred.interval(), gt.interval());
    let union = p.len() + g.len();
    let mut inter_frames = 0;
    let mut sum = 0.0;
    for t in p.start().max(g.start())..=p.end().min(g.end()) {
        if let (Some(a), Some(b)) = (pred.box_at(t), gt.box_at(t)) {
            inter_frames += 1;
            sum += a.iou(b);
        }
    }
    sum / (union - inter_frames) as f64
}

/// Hit when the predicted center lies inside the ground-truth box, borders
/// included.
pub fn pointing_game(pred: &BoundingBox, gt: &BoundingBox) -> bool {
    gt.contains_point(pred.cx, pred.cy)
}

/// Metrics of one evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub t_iou: f64,
    pub v_iou: f64,
    pub pointing_hit: Option<bool>,
}

impl SampleResult {
    pub fn evaluate(pred: &SpatioTemporalTube, gt: &GroundingAnnotation) -> Self {
        Self {
            t_iou: t_iou(pred.interval(), gt.interval()),
            v_iou: v_iou(pred, gt),
            pointing_hit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub samples: usize,
    #[serde(rename = "m_tIoU")]
    pub m_tiou: f64,
    #[serde(rename = "m_vIoU")]
    pub m_viou: f64,
    /// Fraction of samples with tube IoU strictly above each threshold, keyed
    /// by the threshold formatted as `vIoU@0.3`. Serialized inline, next to
    /// the means.
    #[serde(flatten)]
    pub viou_at: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pointing_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn viou_at(&self, threshold: f64) -> Option<f64> {
        self.viou_at.get(&threshold_key(threshold)).copied()
    }
}

pub fn threshold_key(threshold: f64) -> String {
    format!("vIoU@{threshold}")
}

/// Means over samples and threshold fractions. Pointing accuracy is reported
/// only when every sample carries a pointing result.
pub fn aggregate(results: &[SampleResult], thresholds: &[f64]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Data("no samples to aggregate".into()));
    }
    let n = results.len() as f64;
    let m_tiou = results.iter().map(|r| r.t_iou).sum::<f64>() / n;
    let m_viou = results.iter().map(|r| r.v_iou).sum::<f64>() / n;
    let viou_at = thresholds
        .iter()
        .map(|&th| {
            let hits = results.iter().filter(|r| r.v_iou > th).count();
            (threshold_key(th), hits as f64 / n)
        })
        .collect();
    let pointing_accuracy = results
        .iter()
        .map(|r| r.pointing_hit)
        .collect::<Option<Vec<bool>>>()
        .map(|hits| hits.iter().filter(|&&h| h).count() as f64 / n);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        samples: results.len(),
        m_tiou,
        m_viou,
        viou_at,
        pointing_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: usize, e: usize) -> TemporalInterval {
        TemporalInterval::new(s, e, false).unwrap()
    }

    #[test]
    fn t_iou_examples() {
        assert_eq!(t_iou(iv(0, 3), iv(0, 3)), 1.0);
        assert_eq!(t_iou(iv(0, 1), iv(3, 4)), 0.0);
        assert!((t_iou(iv(0, 3), iv(2, 5)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pointing_edges() {
        let gt = BoundingBox::from_corners(0.2, 0.2, 0.6, 0.6).unwrap();
        let on_edge = BoundingBox::new(0.6, 0.4, 0.1, 0.1).unwrap();
        let outside = BoundingBox::new(0.8, 0.4, 0.1, 0.1).unwrap();
        assert!(pointing_game(&on_edge, &gt));
        assert!(!pointing_game(&outside, &gt));
    }

    #[test]
    fn singleton_aggregate() {
        let r = SampleResult {
            t_iou: 0.6,
            v_iou: 0.4,
            pointing_hit: None,
        };
        let rep = aggregate(&[r], &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rep.m_viou, 0.4);
        assert_eq!(rep.viou_at(0.3), Some(1.0));
        assert_eq!(rep.viou_at(0.5), Some(0.0));
        assert!(rep.pointing_accuracy.is_none());
        assert!(aggregate(&[], &DEFAULT_THRESHOLDS).is_err());
    }
}
