//! Training objective: relevance and attribute BCE, temporal KL, box regression.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{IouLoss, LossWeights};
use crate::corpus::BoxCxCyWh;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Summed binary cross-entropy of probabilities `p` against `target`, with `p` clipped to `[eps, 1 - eps]`.
pub fn bce_sum(g: &mut Graph, p: Var, target: &[f64], eps: f64) -> Result<Var> {
    if g.value(p).numel() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            g.value(p).numel(),
            target.len()
        )));
    }
    let shape = g.shape(p).to_vec();
    let y = g.constant(Tensor::new(&shape, target.to_vec()));
    let one_minus_y = g.constant(Tensor::new(&shape, target.iter().map(|t| 1.0 - t).collect()));
    let pc = g.clamp(p, eps, 1.0 - eps);
    let lp = g.log(pc);
    let q = g.neg(pc);
    let q = g.shift(q, 1.0);
    let lq = g.log(q);
    let a = g.mul(lp, y);
    let b = g.mul(lq, one_minus_y);
    let s = g.add(a, b);
    let s = g.sum(s);
    Ok(g.neg(s))
}

/// `y(i) = 1` iff `start <= i <= end`.
pub fn span_target(n: usize, span: (usize, usize)) -> Result<Vec<f64>> {
    if span.0 > span.1 || span.1 >= n {
        return Err(Error::Span {
            start: span.0,
            end: span.1,
            len: n,
        });
    }
    Ok((0..n).map(|i| if i >= span.0 && i <= span.1 { 1.0 } else { 0.0 }).collect())
}

/// Frame-averaged BCE of each present score stream, summed over streams.
pub fn tts_loss(g: &mut Graph, streams: &[Var], gt_span: (usize, usize), eps: f64) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for &s in streams {
        let n = g.value(s).numel();
        let y = span_target(n, gt_span)?;
        let b = bce_sum(g, s, &y, eps)?;
        let b = g.scale(b, 1.0 / n as f64);
        total = g.add(total, b);
    }
    Ok(total)
}

/// BCE summed over the vocabulary entries of each present branch.
pub fn asa_loss(g: &mut Graph, branches: &[(Var, &[f64])], eps: f64) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for &(c, labels) in branches {
        if g.value(c).numel() != labels.len() {
            return Err(Error::Shape(format!(
                "{} attribute scores for a vocabulary of {}",
                g.value(c).numel(),
                labels.len()
            )));
        }
        let b = bce_sum(g, c, labels, eps)?;
        total = g.add(total, b);
    }
    Ok(total)
}

/// Position-averaged BCE of instance logits `[n_sel, H*W]` against binary masks.
pub fn instance_loss(g: &mut Graph, logits: Var, masks: &[f64], eps: f64) -> Result<Var> {
    let p = g.sigmoid(logits);
    let n = masks.len().max(1);
    let b = bce_sum(g, p, masks, eps)?;
    Ok(g.scale(b, 1.0 / n as f64))
}

/// Target distribution over `n` frames: one-hot at `index`, or a normalised Gaussian.
pub fn temporal_target(n: usize, index: usize, sigma: Option<f64>) -> Vec<f64> {
    match sigma {
        Some(s) if s > 0.0 => {
            let w: Vec<f64> = (0..n)
                .map(|i| {
                    let d = i as f64 - index as f64;
                    libm::exp(-d * d / (2.0 * s * s))
                })
                .collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        }
        _ => (0..n).map(|i| if i == index { 1.0 } else { 0.0 }).collect(),
    }
}

const LOG_FLOOR: f64 = 1e-300;

fn kl_to(g: &mut Graph, h: Var, target: &[f64]) -> Var {
    let idx: Vec<usize> = (0..target.len()).filter(|&i| target[i] > 0.0).collect();
    let p: Vec<f64> = idx.iter().map(|&i| target[i]).collect();
    let entropy: f64 = p.iter().map(|&x| x * libm::log(x)).sum();
    let q = g.select(h, 0, &idx);
    let q = g.clamp(q, LOG_FLOOR, 1.0);
    let lq = g.log(q);
    let w = g.constant(Tensor::new(&[p.len()], p));
    let cross = g.mul(lq, w);
    let cross = g.sum(cross);
    let cross = g.neg(cross);
    g.shift(cross, entropy)
}

/// `KL(target || H_s) + KL(target || H_e)`.
pub fn temporal_loss(g: &mut Graph, h_s: Var, h_e: Var, gt_span: (usize, usize), sigma: Option<f64>) -> Result<Var> {
    let n = g.value(h_s).numel();
    span_target(n, gt_span)?;
    let ts = temporal_target(n, gt_span.0, sigma);
    let te = temporal_target(n, gt_span.1, sigma);
    let a = kl_to(g, h_s, &ts);
    let b = kl_to(g, h_e, &te);
    Ok(g.add(a, b))
}

/// Box regression terms, each averaged over the groundtruth span frames.
#[derive(Clone, Copy, Debug)]
pub struct SpatialTerms {
    pub l1: Var,
    pub iou: Var,
}

/// `boxes: [N_v, 4]`; only frames inside `gt_span` are supervised.
pub fn spatial_loss(
    g: &mut Graph,
    boxes: Var,
    gt_boxes: &[BoxCxCyWh],
    gt_span: (usize, usize),
    beta: f64,
    kind: IouLoss,
) -> Result<SpatialTerms> {
    let n = g.shape(boxes)[0];
    span_target(n, gt_span)?;
    let k = gt_span.1 - gt_span.0 + 1;
    if gt_boxes.len() != k {
        return Err(Error::MissingGroundtruth(format!(
            "{} boxes for a span of {} frames",
            gt_boxes.len(),
            k
        )));
    }
    let p = g.narrow(boxes, 0, gt_span.0, k);
    let flat: Vec<f64> = gt_boxes.iter().flatten().copied().collect();
    let t = g.constant(Tensor::new(&[k, 4], flat));
    let diff = g.sub(p, t);
    let l1 = g.smooth_l1(diff, beta);
    let l1 = g.sum(l1);
    let l1 = g.scale(l1, 1.0 / k as f64);

    let corners = |g: &mut Graph, b: Var| {
        let c = g.narrow(b, 1, 0, 2);
        let wh = g.narrow(b, 1, 2, 2);
        let half = g.scale(wh, 0.5);
        (g.sub(c, half), g.add(c, half), wh)
    };
    let (p0, p1, pwh) = corners(g, p);
    let (t0, t1, twh) = corners(g, t);
    let area = |g: &mut Graph, wh: Var| {
        let w = g.narrow(wh, 1, 0, 1);
        let h = g.narrow(wh, 1, 1, 1);
        g.mul(w, h)
    };
    let lo = g.maximum(p0, t0);
    let hi = g.minimum(p1, t1);
    let iwh = g.sub(hi, lo);
    let iwh = g.relu(iwh);
    let inter = area(g, iwh);
    let ap = area(g, pwh);
    let at = area(g, twh);
    let union = g.add(ap, at);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);
    let score = match kind {
        IouLoss::Plain => iou,
        IouLoss::Generalized => {
            let lo = g.minimum(p0, t0);
            let hi = g.maximum(p1, t1);
            let hwh = g.sub(hi, lo);
            let hull = area(g, hwh);
            let gap = g.sub(hull, union);
            let gap = g.div(gap, hull);
            g.sub(iou, gap)
        }
    };
    let loss = g.neg(score);
    let loss = g.shift(loss, 1.0);
    let loss = g.sum(loss);
    let iou = g.scale(loss, 1.0 / k as f64);
    Ok(SpatialTerms { l1, iou })
}

/// Per-term values of one training example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tts: f64,
    pub asa: f64,
    pub kl: f64,
    pub l1: f64,
    pub iou: f64,
    pub total: f64,
}

/// The five terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub tts: Var,
    pub asa: Var,
    pub kl: Var,
    pub l1: Var,
    pub iou: Var,
}

/// Weighted sum of the five terms.
pub fn total_loss(g: &mut Graph, t: &LossTerms, w: &LossWeights) -> (Var, LossBreakdown) {
    let parts = [(t.tts, w.tts), (t.asa, w.asa), (t.kl, w.kl), (t.l1, w.l1), (t.iou, w.iou)];
    let mut total = g.scalar(0.0);
    for (v, c) in parts {
        if c != 0.0 {
            let s = g.scale(v, c);
            total = g.add(total, s);
        }
    }
    let b = LossBreakdown {
        tts: g.value(t.tts).item(),
        asa: g.value(t.asa).item(),
        kl: g.value(t.kl).item(),
        l1: g.value(t.l1).item(),
        iou: g.value(t.iou).item(),
        total: g.value(total).item(),
    };
    (total, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = core::f64::consts::LN_2;

    fn bce_oracle(p: &[f64], y: &[f64], eps: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            let q = p[i].max(eps).min(1.0 - eps);
            s -= y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln();
        }
        s
    }

    fn run<F: FnOnce(&mut Graph) -> Var>(f: F) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = f(&mut g);
        g.value(v).item()
    }

    #[test]
    fn tts_closed_forms() {
        let half = run(|g| {
            let s = g.constant(Tensor::full(&[6], 0.5));
            tts_loss(g, &[s], (1, 3), 1e-6).unwrap()
        });
        assert!((half - LN2).abs() < 1e-12);
        let exact = run(|g| {
            let s = g.constant(Tensor::new(&[5], span_target(5, (1, 2)).unwrap()));
            tts_loss(g, &[s, s], (1, 2), 1e-6).unwrap()
        });
        assert!((0.0..=1e-3).contains(&exact));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::full(&[4], 0.5));
        assert!(tts_loss(&mut g, &[s], (3, 1), 1e-6).is_err());
        assert!(tts_loss(&mut g, &[s], (1, 4), 1e-6).is_err());
    }

    #[test]
    fn tts_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(2..10);
            let a = rng.random_range(0..n);
            let b = rng.random_range(a..n);
            let sa: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let sm: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let got = run(|g| {
                let x = g.constant(Tensor::new(&[n], sa.clone()));
                let y = g.constant(Tensor::new(&[n], sm.clone()));
                tts_loss(g, &[x, y], (a, b), 1e-6).unwrap()
            });
            let y: Vec<f64> = (0..n).map(|i| if i >= a && i <= b { 1.0 } else { 0.0 }).collect();
            let want = bce_oracle(&sa, &y, 1e-6) / n as f64 + bce_oracle(&sm, &y, 1e-6) / n as f64;
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn asa_closed_forms_and_oracle() {
        let zero = [0.0; 5];
        let v = run(|g| {
            let c = g.constant(Tensor::full(&[5], 0.5));
            asa_loss(g, &[(c, &zero)], 1e-6).unwrap()
        });
        assert!((v - 5.0 * LN2).abs() < 1e-12);
        let labels = [0.0, 1.0, 0.0, 1.0];
        let v = run(|g| {
            let c = g.constant(Tensor::new(&[4], labels.to_vec()));
            asa_loss(g, &[(c, &labels)], 1e-6).unwrap()
        });
        assert!(v <= 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let ca: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let cm: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let la: Vec<f64> = (0..4).map(|_| rng.random_range(0..2) as f64).collect();
            let lm: Vec<f64> = (0..3).map(|_| rng.random_range(0..2) as f64).collect();
            let got = run(|g| {
                let a = g.constant(Tensor::new(&[4], ca.clone()));
                let m = g.constant(Tensor::new(&[3], cm.clone()));
                asa_loss(g, &[(a, &la), (m, &lm)], 1e-6).unwrap()
            });
            let want = bce_oracle(&ca, &la, 1e-6) + bce_oracle(&cm, &lm, 1e-6);
            assert!((got - want).abs() < 1e-9);
        }
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Tensor::full(&[5], 0.5));
        assert!(asa_loss(&mut g, &[(c, &[0.0; 4])], 1e-6).is_err());
    }

    #[test]
    fn temporal_closed_forms_and_oracle() {
        let v = run(|g| {
            let h = g.constant(Tensor::full(&[8], 0.125));
            temporal_loss(g, h, h, (2, 5), None).unwrap()
        });
        assert!((v - 2.0 * libm::log(8.0)).abs() < 1e-12);
        let v = run(|g| {
            let hs = g.constant(Tensor::new(&[4], temporal_target(4, 1, None)));
            let he = g.constant(Tensor::new(&[4], temporal_target(4, 3, None)));
            temporal_loss(g, hs, he, (1, 3), None).unwrap()
        });
        assert_eq!(v, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for sigma in [None, Some(1.0)] {
            for _ in 0..50 {
                let n = rng.random_range(2..9);
                let a = rng.random_range(0..n);
                let b = rng.random_range(a..n);
                let dist = |rng: &mut ChaCha8Rng| {
                    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
                    let z: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / z).collect::<Vec<_>>()
                };
                let (hs, he) = (dist(&mut rng), dist(&mut rng));
                let got = run(|g| {
                    let x = g.constant(Tensor::new(&[n], hs.clone()));
                    let y = g.constant(Tensor::new(&[n], he.clone()));
                    temporal_loss(g, x, y, (a, b), sigma).unwrap()
                });
                let kl = |p: &[f64], q: &[f64]| {
                    let mut s = 0.0;
                    for i in 0..n {
                        if p[i] > 0.0 {
                            s += p[i] * (p[i] / q[i]).ln();
                        }
                    }
                    s
                };
                let want = kl(&temporal_target(n, a, sigma), &hs) + kl(&temporal_target(n, b, sigma), &he);
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn smoothed_target_is_a_distribution() {
        let t = temporal_target(9, 4, Some(1.5));
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t[3], t[5]);
        assert!(t[4] > t[3]);
    }

    fn spatial(pred: &[BoxCxCyWh], gt: &[BoxCxCyWh], span: (usize, usize), kind: IouLoss) -> (f64, f64) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let flat: Vec<f64> = pred.iter().flatten().copied().collect();
        let b = g.constant(Tensor::new(&[pred.len(), 4], flat));
        let t = spatial_loss(&mut g, b, gt, span, 0.1, kind).unwrap();
        (g.value(t.l1).item(), g.value(t.iou).item())
    }

    /// Generalized IoU from corner arithmetic.
    fn giou_oracle(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
        let (ax0, ax1, ay0, ay1) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0, a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
        let (bx0, bx1, by0, by1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0, b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = a[2] * a[3] + b[2] * b[3] - inter;
        let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
        inter / union - (hull - union) / hull
    }

    #[test]
    fn spatial_exact_and_touching() {
        let gt = [[0.3, 0.4, 0.2, 0.2], [0.5, 0.5, 0.4, 0.2]];
        let pred = [[0.9, 0.9, 0.1, 0.1], gt[0], gt[1]];
        let (l1, iou) = spatial(&pred, &gt, (1, 2), IouLoss::Generalized);
        assert_eq!(l1, 0.0);
        assert!(iou.abs() < 1e-15);
        // touching boxes: IoU 0, hull equals union, so GIoU 0 and the term is 1
        let a = [0.25, 0.5, 0.5, 1.0];
        let b = [0.75, 0.5, 0.5, 1.0];
        let (_, iou) = spatial(&[a], &[b], (0, 0), IouLoss::Generalized);
        assert!((iou - (1.0 - giou_oracle(a, b))).abs() < 1e-12);
        assert!((iou - 1.0).abs() < 1e-12);
        // separated boxes: GIoU below 0
        let c = [0.1, 0.1, 0.1, 0.1];
        let (_, iou) = spatial(&[c], &[b], (0, 0), IouLoss::Generalized);
        assert!((iou - (1.0 - giou_oracle(c, b))).abs() < 1e-12);
        assert!(iou > 1.0);
        let (_, plain) = spatial(&[c], &[b], (0, 0), IouLoss::Plain);
        assert_eq!(plain, 1.0);
    }

    #[test]
    fn spatial_matches_geometry_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rb = |rng: &mut ChaCha8Rng| -> BoxCxCyWh {
            [rng.random(), rng.random(), rng.random_range(0.05..0.6), rng.random_range(0.05..0.6)]
        };
        for _ in 0..200 {
            let p = [rb(&mut rng), rb(&mut rng)];
            let t = [rb(&mut rng), rb(&mut rng)];
            let (l1, iou) = spatial(&p, &t, (0, 1), IouLoss::Generalized);
            let want = (2.0 - giou_oracle(p[0], t[0]) - giou_oracle(p[1], t[1])) / 2.0;
            assert!((iou - want).abs() < 1e-9);
            let sl1 = |d: f64| if d.abs() < 0.1 { 0.5 * d * d / 0.1 } else { d.abs() - 0.05 };
            let mut l = 0.0;
            for f in 0..2 {
                for c in 0..4 {
                    l += sl1(p[f][c] - t[f][c]);
                }
            }
            assert!((l1 - l / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_span_boxes_are_ignored() {
        let gt = [[0.3, 0.4, 0.2, 0.2]];
        let a = spatial(&[[0.1, 0.2, 0.3, 0.4], [0.5, 0.5, 0.3, 0.3], [0.2; 4]], &gt, (1, 1), IouLoss::Generalized);
        let b = spatial(&[[0.9, 0.8, 0.1, 0.05], [0.5, 0.5, 0.3, 0.3], [0.7; 4]], &gt, (1, 1), IouLoss::Generalized);
        assert_eq!(a, b);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let bx = g.constant(Tensor::full(&[3, 4], 0.5));
        assert!(spatial_loss(&mut g, bx, &gt, (0, 1), 0.1, IouLoss::Plain).is_err());
    }

    #[test]
    fn total_is_linear_in_weights() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v: Vec<Var> = (1..=5).map(|i| g.scalar(i as f64 * 0.5)).collect();
        let terms = LossTerms {
            tts: v[0],
            asa: v[1],
            kl: v[2],
            l1: v[3],
            iou: v[4],
        };
        let w = LossWeights::default();
        let (_, b) = total_loss(&mut g, &terms, &w);
        assert_eq!(b.total, 0.5 + 1.0 + 10.0 * 1.5 + 5.0 * 2.0 + 3.0 * 2.5);
        let w2 = LossWeights {
            tts: 2.0,
            asa: 2.0,
            kl: 20.0,
            l1: 10.0,
            iou: 6.0,
        };
        let (_, b2) = total_loss(&mut g, &terms, &w2);
        assert_eq!(b2.total, 2.0 * b.total);
        let zero = LossWeights {
            tts: 0.0,
            asa: 0.0,
            kl: 0.0,
            l1: 0.0,
            iou: 0.0,
        };
        assert_eq!(total_loss(&mut g, &terms, &zero).1.total, 0.0);
    }
}
