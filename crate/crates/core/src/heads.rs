//! Box and temporal prediction heads, and tube inference.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{inverse_sigmoid, sigmoid, Linear, Mlp, ParamBuilder};
use crate::types::{BoundingBox, SpatioTemporalTube, TemporalInterval};

/// Start and end probabilities over the frames of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalDistributions {
    pub tau_s: Vec<f64>,
    pub tau_e: Vec<f64>,
}

impl TemporalDistributions {
    pub fn new(tau_s: Vec<f64>, tau_e: Vec<f64>) -> Result<Self> {
        if tau_s.len() != tau_e.len() || tau_s.is_empty() {
            return Err(Error::Shape(format!(
                "start/end distributions of lengths {} and {}",
                tau_s.len(),
                tau_e.len()
            )));
        }
        Ok(Self { tau_s, tau_e })
    }

    /// Softmax over frames of start and end logits.
    pub fn from_logits(start: &[f64], end: &[f64]) -> Result<Self> {
        Self::new(softmax(start), softmax(end))
    }

    /// From a `[T, 2]` probability tensor (column 0 start, column 1 end).
    pub fn from_tensor(probs: &Tensor) -> Result<Self> {
        let rows: Vec<Vec<f64>> = probs.to_dtype(DType::F64)?.to_vec2()?;
        Self::new(
            rows.iter().map(|r| r[0]).collect(),
            rows.iter().map(|r| r[1]).collect(),
        )
    }

    pub fn num_frames(&self) -> usize {
        self.tau_s.len()
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per-frame candidate boxes and their confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePredictions {
    num_frames: usize,
    num_queries: usize,
    boxes: Vec<[f64; 4]>,
    scores: Vec<f64>,
}

impl FramePredictions {
    pub fn new(
        num_frames: usize,
        num_queries: usize,
        boxes: Vec<[f64; 4]>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let n = num_frames * num_queries;
        if boxes.len() != n || scores.len() != n || n == 0 {
            return Err(Error::Shape(format!(
                "{} boxes and {} scores for {num_frames} frames of {num_queries} queries",
                boxes.len(),
                scores.len()
            )));
        }
        Ok(Self {
            num_frames,
            num_queries,
            boxes,
            scores,
        })
    }

    /// From `boxes: [T, K, 4]` and confidence logits `[T, K]`.
    pub fn from_tensors(boxes: &Tensor, confidence_logits: &Tensor) -> Result<Self> {
        let (t, k, _) = boxes.dims3()?;
        let flat: Vec<f64> = boxes.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let boxes = flat.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let scores = sigmoid(confidence_logits)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        Self::new(t, k, boxes, scores)
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn box_at(&self, frame: usize, query: usize) -> [f64; 4] {
        self.boxes[frame * self.num_queries + query]
    }

    pub fn score_at(&self, frame: usize, query: usize) -> f64 {
        self.scores[frame * self.num_queries + query]
    }

    /// Highest-scoring query of a frame; the lowest index wins ties.
    pub fn best_query(&self, frame: usize) -> usize {
        let mut best = 0;
        for q in 1..self.num_queries {
            if self.score_at(frame, q) > self.score_at(frame, best) {
                best = q;
            }
        }
        best
    }
}

/// Box regression: a 3-layer MLP whose output offsets the anchor in
/// inverse-sigmoid space, plus a per-query confidence logit.
#[derive(Debug, Clone)]
pub struct BoxHead {
    offsets: Mlp,
    confidence: Linear,
}

impl BoxHead {
    pub fn new(pb: &ParamBuilder, d_model: usize) -> Result<Self> {
        Ok(Self {
            offsets: Mlp::new(&pb.pp("offsets"), d_model, d_model, 4, 3, true)?,
            confidence: Linear::new(&pb.pp("confidence"), d_model, 1)?,
        })
    }

    /// `hidden: [T, K, d]`, `anchors: [T, K, 4]` → boxes `[T, K, 4]` and
    /// confidence logits `[T, K]`.
    pub fn forward(&self, hidden: &Tensor, anchors: &Tensor) -> Result<(Tensor, Tensor)> {
        let boxes = sigmoid(&(inverse_sigmoid(anchors)? + self.offsets.forward(hidden)?)?)?;
        let logits = self.confidence.forward(hidden)?.squeeze(D::Minus1)?;
        Ok((boxes, logits))
    }
}

/// Start/end logits per frame from the mean of the frame's queries.
#[derive(Debug, Clone)]
pub struct TemporalHead {
    mlp: Mlp,
}

impl TemporalHead {
    pub fn new(pb: &ParamBuilder, d_model: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(pb, d_model, d_model, 2, 3, false)?,
        })
    }

    /// `hidden: [T, K, d]` → logits `[T, 2]`.
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        self.mlp.forward(&hidden.mean(1)?)
    }

    /// `hidden: [T, K, d]` → probabilities `[T, 2]`, each column a softmax
    /// over frames.
    pub fn forward(&self, hidden: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(hidden)?, 0)?)
    }
}

/// Best `(start, end)` under the joint score `τ_s[s]·τ_e[e]`, restricted to
/// `s < e` (strict) or `s ≤ e`. Ties go to the smallest start, then the
/// smallest end.
pub fn extract_interval(
    dist: &TemporalDistributions,
    strict: bool,
) -> Result<(TemporalInterval, f64)> {
    let t = dist.num_frames();
    let gap = usize::from(strict);
    if t <= gap {
        return Err(Error::NoValidInterval(format!(
            "{t} frame(s) admit no interval with start before end"
        )));
    }
    // For each end, the best admissible start so far (first occurrence of
    // the maximum keeps the smallest start).
    let mut best_start = 0;
    let mut best: Option<(usize, usize, f64)> = None;
    for e in gap..t {
        let s_new = e - gap;
        if dist.tau_s[s_new] > dist.tau_s[best_start] {
            best_start = s_new;
        }
        let score = dist.tau_s[best_start] * dist.tau_e[e];
        // a zero product ties with every start, the smallest being 0
        let start = if score == 0.0 { 0 } else { best_start };
        let better = match best {
            None => true,
            Some((bs, _, bscore)) => score > bscore || (score == bscore && start < bs),
        };
        if better {
            best = Some((start, e, score));
        }
    }
    let (s, e, score) = best.expect("at least one end frame");
    Ok((TemporalInterval::new(s, e, strict)?, score))
}

/// Per frame of the interval, the box of its highest-confidence query.
pub fn extract_tube(
    frames: &FramePredictions,
    interval: TemporalInterval,
    score: f64,
) -> Result<SpatioTemporalTube> {
    interval.check_within(frames.num_frames())?;
    let boxes = interval
        .frames()
        .map(|t| {
            let [cx, cy, w, h] = frames.box_at(t, frames.best_query(t));
            BoundingBox::new(cx, cy, w.max(1e-6), h.max(1e-6)).map(|b| b.clipped())
        })
        .collect::<Result<Vec<_>>>()?;
    SpatioTemporalTube::new(interval, boxes, score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(dist: &TemporalDistributions, strict: bool) -> (usize, usize, f64) {
        let t = dist.num_frames();
        let mut best = (0, 0, f64::NEG_INFINITY);
        for s in 0..t {
            for e in 0..t {
                if e < s || (strict && e == s) {
                    continue;
                }
                let v = dist.tau_s[s] * dist.tau_e[e];
                if v > best.2 {
                    best = (s, e, v);
                }
            }
        }
        best
    }

    #[test]
    fn hand_example() {
        let d = TemporalDistributions::new(vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7]).unwrap();
        let (iv, score) = extract_interval(&d, true).unwrap();
        assert_eq!(iv.to_one_based(), (1, 3));
        assert!((score - 0.49).abs() < 1e-12);
    }

    #[test]
    fn uniform_tie_break() {
        let d = TemporalDistributions::new(vec![0.25; 4], vec![0.25; 4]).unwrap();
        let (iv, score) = extract_interval(&d, true).unwrap();
        assert_eq!((iv.start(), iv.end()), (0, 1));
        assert!((score - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn single_frame_strict_fails() {
        let d = TemporalDistributions::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            extract_interval(&d, true),
            Err(Error::NoValidInterval(_))
        ));
        let (iv, _) = extract_interval(&d, false).unwrap();
        assert_eq!((iv.start(), iv.end()), (0, 0));
    }

    #[test]
    fn non_strict_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let t = rng.random_range(1..20);
            let s: Vec<f64> = (0..t).map(|_| rng.random_range(0..4) as f64).collect();
            let e: Vec<f64> = (0..t).map(|_| rng.random_range(0..4) as f64).collect();
            let d = TemporalDistributions::new(s, e).unwrap();
            let (iv, score) = extract_interval(&d, false).unwrap();
            let (bs, be, bv) = brute(&d, false);
            assert_eq!((iv.start(), iv.end(), score), (bs, be, bv));
        }
    }

    #[test]
    fn zero_offsets_return_anchor() {
        use crate::nn::ParamStore;
        use candle_core::Device;
        let store = ParamStore::new(DType::F64, Device::Cpu);
        let head = BoxHead::new(&store.builder(1).pp("h"), 8).unwrap();
        let hidden = Tensor::randn(0f64, 1.0, (2, 3, 8), &Device::Cpu).unwrap();
        let anchors = Tensor::rand(0.1f64, 0.9, (2, 3, 4), &Device::Cpu).unwrap();
        let (boxes, _) = head.forward(&hidden, &anchors).unwrap();
        let diff = (boxes - &anchors)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn tube_takes_best_query_per_frame() {
        let boxes = vec![
            [0.2, 0.2, 0.1, 0.1],
            [0.6, 0.6, 0.2, 0.2],
            [0.3, 0.3, 0.1, 0.1],
            [0.7, 0.7, 0.2, 0.2],
            [0.4, 0.4, 0.1, 0.1],
            [0.8, 0.8, 0.2, 0.2],
        ];
        let preds = FramePredictions::new(3, 2, boxes, vec![0.1, 0.9, 0.8, 0.2, 0.5, 0.5]).unwrap();
        let tube = extract_tube(&preds, TemporalInterval::new(1, 2, true).unwrap(), 0.3).unwrap();
        assert_eq!(tube.boxes().len(), 2);
        assert_eq!(tube.boxes()[0].cx, 0.3);
        assert_eq!(tube.boxes()[1].cx, 0.4);
    }
}
