//! Training objective and evaluation metric.
//!
//! The objective combines binary cross entropy H with the soft Jaccard score
//! J as `L = alpha * H + (1 - alpha) * (1 - J)`; the evaluation metric is the
//! exact Jaccard index |A n B| / |A u B| over binarized masks.

use crate::tensor::{bce_op, combine_terms, soft_jaccard_op, Element, TensorBase, TensorError};

/// Weighting and numeric-stability knobs of the combined loss.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Weight of the cross-entropy term, in [0, 1].
    pub alpha: f64,
    pub bce_eps: f64,
    pub jaccard_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.7,
            bce_eps: 1e-7,
            jaccard_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TensorError::InvalidConfig {
                op: "loss",
                message: format!("alpha must be in [0, 1], got {}", self.alpha),
            });
        }
        if self.bce_eps <= 0.0 || self.jaccard_eps <= 0.0 {
            return Err(TensorError::InvalidConfig {
                op: "loss",
                message: "eps values must be positive".into(),
            });
        }
        Ok(())
    }
}

/// A binary target mask paired with a same-shape prediction.
///
/// Construction validates that the shapes agree and that the target contains
/// only exact 0.0 / 1.0 values; prediction values are not range-checked (the
/// sigmoid head keeps them in (0, 1), file-loaded maps may hit the ends and
/// are handled by clamping in the cross entropy).
pub struct MaskPair<T: Element> {
    target: TensorBase<T>,
    prediction: TensorBase<T>,
}

impl<T: Element> MaskPair<T> {
    pub fn new(target: TensorBase<T>, prediction: TensorBase<T>) -> Result<Self, TensorError> {
        if target.shape() != prediction.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mask_pair",
                left: target.shape().to_vec(),
                right: prediction.shape().to_vec(),
            });
        }
        if target
            .data()
            .iter()
            .any(|&v| v != T::zero() && v != T::one())
        {
            return Err(TensorError::InvalidConfig {
                op: "mask_pair",
                message: "target mask must contain only 0.0 and 1.0".into(),
            });
        }
        Ok(MaskPair { target, prediction })
    }

    pub fn target(&self) -> &TensorBase<T> {
        &self.target
    }

    pub fn prediction(&self) -> &TensorBase<T> {
        &self.prediction
    }

    pub fn len(&self) -> usize {
        self.target.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Soft Jaccard score, differentiable w.r.t. the prediction. In (0, 1].
pub fn soft_jaccard<T: Element>(pair: &MaskPair<T>, eps: f64) -> Result<TensorBase<T>, TensorError> {
    soft_jaccard_op(&pair.target, &pair.prediction, eps)
}

/// Binary cross entropy with predictions clamped to [eps, 1-eps]. Non-negative.
pub fn bce<T: Element>(pair: &MaskPair<T>, eps: f64) -> Result<TensorBase<T>, TensorError> {
    bce_op(&pair.target, &pair.prediction, eps)
}

/// The combined objective `alpha * H + (1 - alpha) * (1 - J)`. Gradient flows
/// through both terms.
pub fn combined_loss<T: Element>(
    pair: &MaskPair<T>,
    config: &LossConfig,
) -> Result<TensorBase<T>, TensorError> {
    config.validate()?;
    let h = bce(pair, config.bce_eps)?;
    let j = soft_jaccard(pair, config.jaccard_eps)?;
    combine_terms(&h, &j, config.alpha)
}

fn count_intersection_union(a: &[u8], b: &[u8]) -> (usize, usize) {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let x = x != 0;
        let y = y != 0;
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    (inter, union)
}

/// Exact Jaccard index of two binary masks given as 0/1 bytes.
/// Two empty masks agree perfectly: 1.0.
pub fn eval_iou(pred: &[u8], gt: &[u8]) -> Result<f64, TensorError> {
    if pred.len() != gt.len() {
        return Err(TensorError::ShapeMismatch {
            op: "eval_iou",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    let (inter, union) = count_intersection_union(pred, gt);
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// [`eval_iou`] over binary float tensors (values must be exactly 0.0 or 1.0).
pub fn eval_iou_tensors<T: Element>(
    pred: &TensorBase<T>,
    gt: &TensorBase<T>,
) -> Result<f64, TensorError> {
    if pred.shape() != gt.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "eval_iou",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    let to_bits = |t: &TensorBase<T>| -> Result<Vec<u8>, TensorError> {
        t.data()
            .iter()
            .map(|&v| {
                if v == T::zero() {
                    Ok(0u8)
                } else if v == T::one() {
                    Ok(1u8)
                } else {
                    Err(TensorError::InvalidConfig {
                        op: "eval_iou",
                        message: "masks must be binary".into(),
                    })
                }
            })
            .collect()
    };
    eval_iou(&to_bits(pred)?, &to_bits(gt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pair32(target: Vec<f32>, pred: Vec<f32>) -> MaskPair<f32> {
        let n = target.len();
        MaskPair::new(
            Tensor::from_vec(target, &[n]).unwrap(),
            Tensor::from_vec(pred, &[n]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn jaccard_perfect_prediction() {
        let p = pair32(vec![1.0, 1.0], vec![1.0, 1.0]);
        let j = soft_jaccard(&p, 1e-7).unwrap().item();
        assert!((j - 1.0).abs() < 1e-6, "J = {j}");
    }

    #[test]
    fn jaccard_half_confidence() {
        // Direct evaluation of the per-pixel term: 0.5 / (1 + 0.5 - 0.5).
        let p = pair32(vec![1.0], vec![0.5]);
        let j = soft_jaccard(&p, 1e-7).unwrap().item();
        assert!((j - 0.5).abs() < 1e-6, "J = {j}");
    }

    #[test]
    fn jaccard_binary_term_table() {
        // For binary predictions the per-pixel term collapses to:
        // (1,1) -> 1, (1,0) -> 0, (0,1) -> 0, (0,0) -> 1 (the eps-smoothed 0/0).
        for (y, p, want) in [(1.0, 1.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)] {
            let pr = pair32(vec![y], vec![p]);
            let j = soft_jaccard(&pr, 1e-7).unwrap().item();
            assert!((j - want).abs() < 1e-6, "term({y},{p}) = {j}, want {want}");
        }
    }

    #[test]
    fn bce_anchors() {
        let p = pair32(vec![1.0], vec![1.0]);
        let h = bce(&p, 1e-7).unwrap().item();
        assert!(h.abs() < 1e-6, "H = {h}");

        let p = pair32(vec![1.0], vec![0.5]);
        let h = bce(&p, 1e-7).unwrap().item();
        assert!((h - std::f32::consts::LN_2).abs() < 1e-6, "H = {h}");
    }

    #[test]
    fn combined_is_recomposition() {
        let cfg = LossConfig::default();
        let target = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let pred = vec![0.9, 0.2, 0.6, 0.4, 0.15, 0.85, 0.5, 0.05];
        let p = pair32(target, pred);
        let l = combined_loss(&p, &cfg).unwrap().item() as f64;
        let h = bce(&p, cfg.bce_eps).unwrap().item() as f64;
        let j = soft_jaccard(&p, cfg.jaccard_eps).unwrap().item() as f64;
        let want = cfg.alpha * h + (1.0 - cfg.alpha) * (1.0 - j);
        assert!((l - want).abs() < 1e-6, "L = {l}, recomposed {want}");
    }

    #[test]
    fn combined_anchor_formula() {
        // H = 1, J = 0, alpha = 0.7 -> exactly 1.0 through the graph path.
        let h = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let j = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        let l = crate::tensor::combine_terms(&h, &j, 0.7).unwrap().item();
        assert_eq!(l, 1.0);

        // Perfect prediction: H = 0, J = 1 -> 0.
        let h = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        let j = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let l = crate::tensor::combine_terms(&h, &j, 0.7).unwrap().item();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn scalar_loop_oracles() {
        // Independent per-pixel reimplementation, f64 throughout.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let n = rng.random_range(1..=16);
            let target: Vec<f32> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
            let pred: Vec<f32> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();

            let mut j_oracle = 0.0f64;
            let mut h_oracle = 0.0f64;
            for i in 0..n {
                let y = target[i] as f64;
                let p = pred[i] as f64;
                j_oracle += (y * p + 1e-7) / (y + p - y * p + 1e-7);
                let pc = p.clamp(1e-7, 1.0 - 1e-7);
                h_oracle -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            }
            j_oracle /= n as f64;
            h_oracle /= n as f64;

            let pair = pair32(target, pred);
            let j = soft_jaccard(&pair, 1e-7).unwrap().item() as f64;
            let h = bce(&pair, 1e-7).unwrap().item() as f64;
            assert!((j - j_oracle).abs() < 1e-6, "J {j} vs oracle {j_oracle}");
            assert!((h - h_oracle).abs() < 1e-6, "H {h} vs oracle {h_oracle}");
        }
    }

    #[test]
    fn monotonicity_on_road_pixels() {
        // Raising a prediction under a positive label must increase J and
        // decrease H.
        let base = pair32(vec![1.0, 0.0], vec![0.4, 0.3]);
        let up = pair32(vec![1.0, 0.0], vec![0.5, 0.3]);
        assert!(
            soft_jaccard(&up, 1e-7).unwrap().item() > soft_jaccard(&base, 1e-7).unwrap().item()
        );
        assert!(bce(&up, 1e-7).unwrap().item() < bce(&base, 1e-7).unwrap().item());
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        use crate::gradcheck::grad_check;
        let target = TensorBase::<f64>::from_vec(vec![1.0, 0.0, 1.0, 0.0], &[4]).unwrap();
        let pred = TensorBase::<f64>::param(vec![0.3, 0.7, 0.85, 0.12], &[4]).unwrap();
        let cfg = LossConfig::default();
        let report = grad_check(
            "combined_loss",
            &[target, pred],
            |ins| {
                let pair = MaskPair::new(ins[0].clone(), ins[1].clone()).unwrap();
                combined_loss(&pair, &cfg).unwrap()
            },
            1e-3,
        );
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn iou_hand_cases() {
        // identical nonempty
        assert_eq!(eval_iou(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        // disjoint nonempty
        assert_eq!(eval_iou(&[1, 0], &[0, 1]).unwrap(), 0.0);
        // 2x2 hand count: pred {(0,0),(0,1)}, gt {(0,1),(1,1)}
        let iou = eval_iou(&[1, 1, 0, 0], &[0, 1, 0, 1]).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
        // both empty
        assert_eq!(eval_iou(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn iou_symmetry() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..32);
            let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            assert_eq!(eval_iou(&a, &b).unwrap(), eval_iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let p = Tensor::from_vec(vec![0.5, 0.5], &[2]).unwrap();
        assert!(MaskPair::new(t, p).is_err());
        assert!(eval_iou(&[1], &[1, 0]).is_err());
    }
}
