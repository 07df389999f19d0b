//! Grounding metrics: temporal IoU, spatio-temporal vIoU and their aggregates.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::BoxCxCyWh;
use crate::decoder::TubePrediction;
use crate::error::{Error, Result};

pub fn box_iou(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
    let (ax0, ax1) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let (ay0, ay1) = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, bx1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (by0, by1) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of two inclusive frame ranges.
pub fn t_iou(pred: (usize, usize), gt: (usize, usize)) -> f64 {
    let inter = (pred.1.min(gt.1) + 1).saturating_sub(pred.0.max(gt.0));
    let union = (pred.1 - pred.0 + 1) + (gt.1 - gt.0 + 1) - inter;
    inter as f64 / union as f64
}

/// Groundtruth tube: inclusive span and one box per span frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub span: (usize, usize),
    pub boxes: Vec<BoxCxCyWh>,
}

/// Box IoU summed over the shared frames, divided by the size of the frame union.
pub fn v_iou(pred: &TubePrediction, gt: &GroundTruth) -> f64 {
    let (p, t) = (pred.span, gt.span);
    let lo = p.0.max(t.0);
    let hi = p.1.min(t.1);
    let mut sum = 0.0;
    if lo <= hi {
        for f in lo..=hi {
            sum += box_iou(pred.boxes[f], gt.boxes[f - t.0]);
        }
    }
    let inter = (hi + 1).saturating_sub(lo);
    let union = (p.1 - p.0 + 1) + (t.1 - t.0 + 1) - inter;
    sum / union as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t_iou: f64,
    pub v_iou: f64,
}

/// Aggregates in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub m_tiou: f64,
    pub m_viou: f64,
    pub viou_03: f64,
    pub viou_05: f64,
    pub records: Vec<SampleRecord>,
}

impl EvalResult {
    pub fn from_records(records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("no samples to evaluate"));
        }
        let n = records.len() as f64;
        let mean = |f: &dyn Fn(&SampleRecord) -> f64| 100.0 * records.iter().map(f).sum::<f64>() / n;
        let above = |r: f64| 100.0 * records.iter().filter(|x| x.v_iou > r).count() as f64 / n;
        Ok(Self {
            m_tiou: mean(&|r| r.t_iou),
            m_viou: mean(&|r| r.v_iou),
            viou_03: above(0.3),
            viou_05: above(0.5),
            records,
        })
    }

    /// `[m_tIoU, m_vIoU, vIoU@0.3, vIoU@0.5]`.
    pub fn headline(&self) -> [f64; 4] {
        [self.m_tiou, self.m_viou, self.viou_03, self.viou_05]
    }
}

pub fn evaluate(preds: &[TubePrediction], gts: &[GroundTruth]) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} groundtruths", preds.len(), gts.len())));
    }
    let records = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| SampleRecord {
            t_iou: t_iou(p.span, g.span),
            v_iou: v_iou(p, g),
        })
        .collect();
    EvalResult::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tube(span: (usize, usize), boxes: Vec<BoxCxCyWh>) -> TubePrediction {
        let n = boxes.len();
        TubePrediction {
            boxes,
            h_s: vec![1.0 / n as f64; n],
            h_e: vec![1.0 / n as f64; n],
            span,
        }
    }

    #[test]
    fn box_examples() {
        let a = [0.5, 0.5, 1.0, 1.0];
        assert_eq!(box_iou(a, a), 1.0);
        assert!((box_iou(a, [0.75, 0.5, 0.5, 1.0]) - 0.5).abs() < 1e-15);
        assert!((box_iou([0.25, 0.5, 0.5, 1.0], [0.5, 0.5, 0.5, 1.0]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(box_iou([0.1, 0.1, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1]), 0.0);
        assert_eq!(box_iou([0.1, 0.1, 0.0, 0.0], [0.1, 0.1, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn span_examples() {
        assert_eq!(t_iou((2, 5), (2, 5)), 1.0);
        assert_eq!(t_iou((2, 5), (4, 7)), 2.0 / 6.0);
        assert_eq!(t_iou((0, 1), (3, 4)), 0.0);
    }

    #[test]
    fn viou_examples() {
        let b = [0.5, 0.5, 0.2, 0.2];
        let gt = GroundTruth {
            span: (2, 5),
            boxes: vec![b; 4],
        };
        assert_eq!(v_iou(&tube((2, 5), vec![b; 8]), &gt), 1.0);
        let gt = GroundTruth {
            span: (2, 5),
            boxes: vec![b; 4],
        };
        assert_eq!(v_iou(&tube((0, 3), vec![b; 8]), &gt), 2.0 / 6.0);
        assert_eq!(v_iou(&tube((6, 7), vec![b; 8]), &gt), 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let b = [0.5, 0.5, 0.2, 0.2];
        let gt = GroundTruth {
            span: (1, 2),
            boxes: vec![b; 2],
        };
        let r = evaluate(&[tube((1, 2), vec![b; 4])], &[gt.clone()]).unwrap();
        assert_eq!(r.headline(), [100.0; 4]);
        let r = EvalResult::from_records(vec![SampleRecord { t_iou: 1.0, v_iou: 0.4 }]).unwrap();
        assert_eq!((r.viou_03, r.viou_05), (100.0, 0.0));
        let r = EvalResult::from_records(vec![SampleRecord { t_iou: 1.0, v_iou: 0.3 }]).unwrap();
        assert_eq!(r.viou_03, 0.0);
        assert!(evaluate(&[], &[gt]).is_err());
        assert!(evaluate(&[], &[]).is_err());
    }
}
