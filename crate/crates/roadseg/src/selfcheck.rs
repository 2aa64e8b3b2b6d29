//! Release-gate self checks: a registry of every differentiable operation,
//! each checked against finite differences on random small instances, plus
//! scalar-loop oracles for the losses and the evaluation metric.
//!
//! Each op lives behind [`CheckedOp`] and is registered by name; the runner
//! executes every registered op exactly once per suite invocation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{grad_check, GradCheckReport};
use crate::loss::{bce, combined_loss, eval_iou, soft_jaccard, LossConfig, MaskPair};
use crate::tensor::{
    add, batchnorm2d, concat_channels, conv2d, conv_transpose2d, maxpool2d, mean_all, relu,
    scale_mul, sigmoid, slice_channels, spatial_dropout, BnStats, TensorBase,
};

/// Default perturbation for the finite-difference probes.
pub const GRADCHECK_EPS: f64 = 1e-3;
/// Acceptance tolerance on the relative error of any single gradient entry.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Tolerance for the scalar-loop loss/metric oracles.
pub const ORACLE_TOL: f64 = 1e-6;

/// One gradient-checkable operation.
pub trait CheckedOp {
    fn name(&self) -> &'static str;
    /// Builds one random instance and checks it, returning the report.
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport;
}

type F64Tensor = TensorBase<f64>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, grad: bool) -> F64Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    if grad {
        F64Tensor::param(data, shape).unwrap()
    } else {
        F64Tensor::from_vec(data, shape).unwrap()
    }
}

/// Values on a coarse grid in random order: pairwise gaps of 0.05 keep
/// max-pool argmaxes and ReLU signs stable under +-eps probes.
fn rand_distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize], grad: bool) -> F64Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64) * 0.05 - (n as f64) * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    if grad {
        F64Tensor::param(vals, shape).unwrap()
    } else {
        F64Tensor::from_vec(vals, shape).unwrap()
    }
}

fn rand_binary_tensor(rng: &mut ChaCha8Rng, n: usize) -> F64Tensor {
    let data: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    F64Tensor::from_vec(data, &[n]).unwrap()
}

struct Conv2dCheck;

impl CheckedOp for Conv2dCheck {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=k / 2);
        let h = rng.random_range(k..=6);
        let w = rng.random_range(k..=6);
        let x = rand_tensor(rng, &[n, ci, h, w], -1.0, 1.0, true);
        let wgt = rand_tensor(rng, &[co, ci, k, k], -1.0, 1.0, true);
        let b = rand_tensor(rng, &[co], -0.5, 0.5, true);
        grad_check(
            self.name(),
            &[x, wgt, b],
            move |ins| mean_all(&conv2d(&ins[0], &ins[1], Some(&ins[2]), stride, padding).unwrap()),
            eps,
        )
    }
}

struct ConvTranspose2dCheck;

impl CheckedOp for ConvTranspose2dCheck {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let h = rng.random_range(2..=4);
        let w = rng.random_range(2..=4);
        let x = rand_tensor(rng, &[n, ci, h, w], -1.0, 1.0, true);
        let wgt = rand_tensor(rng, &[ci, co, k, k], -1.0, 1.0, true);
        grad_check(
            self.name(),
            &[x, wgt],
            move |ins| mean_all(&conv_transpose2d(&ins[0], &ins[1], stride).unwrap()),
            eps,
        )
    }
}

struct MaxPool2dCheck;

impl CheckedOp for MaxPool2dCheck {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let kernel = rng.random_range(2..=3);
        let stride = rng.random_range(1..=2);
        let x = rand_distinct_tensor(rng, &[1, 1, 6, 6], true);
        grad_check(
            self.name(),
            &[x],
            move |ins| mean_all(&maxpool2d(&ins[0], kernel, stride, 0).unwrap()),
            eps,
        )
    }
}

struct BatchNorm2dCheck;

impl CheckedOp for BatchNorm2dCheck {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let x = rand_tensor(rng, &[2, 3, 4, 4], -2.0, 2.0, true);
        let gamma = rand_tensor(rng, &[3], 0.5, 1.5, true);
        let beta = rand_tensor(rng, &[3], -0.5, 0.5, true);
        grad_check(
            self.name(),
            &[x, gamma, beta],
            |ins| {
                let mut stats = BnStats::identity(3);
                let y = batchnorm2d(&ins[0], &ins[1], &ins[2], &mut stats, true, 1e-5, 0.1).unwrap();
                // A non-uniform functional keeps the check sensitive to the
                // batch-statistic terms a plain mean would cancel out.
                mean_all(&sigmoid(&y))
            },
            eps,
        )
    }
}

struct ReluCheck;

impl CheckedOp for ReluCheck {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        // Inputs bounded away from the kink at 0 by at least 10 * eps.
        let n = rng.random_range(2..=6usize);
        let data: Vec<f64> = (0..n * n)
            .map(|_| {
                let mag = rng.random_range(10.0 * eps..1.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let x = F64Tensor::param(data, &[n, n]).unwrap();
        grad_check(self.name(), &[x], |ins| mean_all(&relu(&ins[0])), eps)
    }
}

struct SigmoidCheck;

impl CheckedOp for SigmoidCheck {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let n = rng.random_range(2..=6usize);
        let x = rand_tensor(rng, &[n], -2.0, 2.0, true);
        grad_check(self.name(), &[x], |ins| mean_all(&sigmoid(&ins[0])), eps)
    }
}

struct AddCheck;

impl CheckedOp for AddCheck {
    fn name(&self) -> &'static str {
        "add"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let n = rng.random_range(2..=6usize);
        let a = rand_tensor(rng, &[n, n], -1.0, 1.0, true);
        let b = rand_tensor(rng, &[n, n], -1.0, 1.0, true);
        grad_check(
            self.name(),
            &[a, b],
            |ins| mean_all(&sigmoid(&add(&ins[0], &ins[1]).unwrap())),
            eps,
        )
    }
}

struct ConcatChannelsCheck;

impl CheckedOp for ConcatChannelsCheck {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let c1 = rng.random_range(1..=3);
        let c2 = rng.random_range(1..=3);
        let a = rand_tensor(rng, &[2, c1, 3, 3], -1.0, 1.0, true);
        let b = rand_tensor(rng, &[2, c2, 3, 3], -1.0, 1.0, true);
        grad_check(
            self.name(),
            &[a, b],
            |ins| mean_all(&sigmoid(&concat_channels(&ins[0], &ins[1]).unwrap())),
            eps,
        )
    }
}

struct SliceChannelsCheck;

impl CheckedOp for SliceChannelsCheck {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let c = rng.random_range(2..=5);
        let start = rng.random_range(0..c - 1);
        let len = rng.random_range(1..=c - start);
        let x = rand_tensor(rng, &[2, c, 3, 3], -1.0, 1.0, true);
        grad_check(
            self.name(),
            &[x],
            move |ins| mean_all(&sigmoid(&slice_channels(&ins[0], start, len).unwrap())),
            eps,
        )
    }
}

struct ScaleMulCheck;

impl CheckedOp for ScaleMulCheck {
    fn name(&self) -> &'static str {
        "scale_mul"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let n = rng.random_range(2..=6usize);
        let s = rng.random_range(0.5..2.0);
        let x = rand_tensor(rng, &[n], -1.0, 1.0, true);
        grad_check(
            self.name(),
            &[x],
            move |ins| mean_all(&sigmoid(&scale_mul(&ins[0], s))),
            eps,
        )
    }
}

struct MeanAllCheck;

impl CheckedOp for MeanAllCheck {
    fn name(&self) -> &'static str {
        "mean_all"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let n = rng.random_range(2..=6usize);
        let x = rand_tensor(rng, &[n, n], -1.0, 1.0, true);
        grad_check(self.name(), &[x], |ins| mean_all(&ins[0]), eps)
    }
}

struct SpatialDropoutCheck;

impl CheckedOp for SpatialDropoutCheck {
    fn name(&self) -> &'static str {
        "spatial_dropout"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let x = rand_tensor(rng, &[2, 4, 3, 3], -1.0, 1.0, true);
        // The mask must be identical across the FD probes: reseed per call.
        let mask_seed = rng.random::<u64>();
        grad_check(
            self.name(),
            &[x],
            move |ins| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                mean_all(&sigmoid(
                    &spatial_dropout(&ins[0], 0.3, true, &mut mask_rng).unwrap(),
                ))
            },
            eps,
        )
    }
}

struct SoftJaccardCheck;

impl CheckedOp for SoftJaccardCheck {
    fn name(&self) -> &'static str {
        "soft_jaccard"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let n = rng.random_range(4..=16usize);
        let target = rand_binary_tensor(rng, n);
        let pred = rand_tensor(rng, &[n], 0.1, 0.9, true);
        grad_check(
            self.name(),
            &[target, pred],
            |ins| {
                let pair = MaskPair::new(ins[0].clone(), ins[1].clone()).unwrap();
                soft_jaccard(&pair, 1e-7).unwrap()
            },
            eps,
        )
    }
}

struct BceCheck;

impl CheckedOp for BceCheck {
    fn name(&self) -> &'static str {
        "bce"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let n = rng.random_range(4..=16usize);
        let target = rand_binary_tensor(rng, n);
        let pred = rand_tensor(rng, &[n], 0.1, 0.9, true);
        grad_check(
            self.name(),
            &[target, pred],
            |ins| {
                let pair = MaskPair::new(ins[0].clone(), ins[1].clone()).unwrap();
                bce(&pair, 1e-7).unwrap()
            },
            eps,
        )
    }
}

struct CombinedLossCheck;

impl CheckedOp for CombinedLossCheck {
    fn name(&self) -> &'static str {
        "combined_loss"
    }
    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
        let n = rng.random_range(4..=16usize);
        let target = rand_binary_tensor(rng, n);
        let pred = rand_tensor(rng, &[n], 0.1, 0.9, true);
        grad_check(
            self.name(),
            &[target, pred],
            |ins| {
                let pair = MaskPair::new(ins[0].clone(), ins[1].clone()).unwrap();
                combined_loss(&pair, &LossConfig::default()).unwrap()
            },
            eps,
        )
    }
}

/// Every differentiable op, registered once by name.
pub fn registry() -> Vec<Box<dyn CheckedOp>> {
    vec![
        Box::new(Conv2dCheck),
        Box::new(ConvTranspose2dCheck),
        Box::new(MaxPool2dCheck),
        Box::new(BatchNorm2dCheck),
        Box::new(ReluCheck),
        Box::new(SigmoidCheck),
        Box::new(AddCheck),
        Box::new(ConcatChannelsCheck),
        Box::new(SliceChannelsCheck),
        Box::new(ScaleMulCheck),
        Box::new(MeanAllCheck),
        Box::new(SpatialDropoutCheck),
        Box::new(SoftJaccardCheck),
        Box::new(BceCheck),
        Box::new(CombinedLossCheck),
    ]
}

/// Aggregate result for one op across all its random instances.
#[derive(Clone, Debug)]
pub struct OpCheckSummary {
    pub name: String,
    pub report: GradCheckReport,
    pub instances: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Runs every registered op `instances` times and aggregates the worst errors.
pub fn run_gradient_suite(
    registry: &[Box<dyn CheckedOp>],
    instances: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Vec<OpCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    registry
        .iter()
        .map(|op| {
            let mut worst = GradCheckReport {
                op_name: op.name().to_string(),
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                num_params_checked: 0,
            };
            for _ in 0..instances {
                let report = op.check(&mut rng, eps);
                worst.merge(&report);
            }
            let pass = worst.max_rel_err < tol;
            OpCheckSummary {
                name: op.name().to_string(),
                report: worst,
                instances,
                tol,
                pass,
            }
        })
        .collect()
}

/// One loss- or metric-oracle comparison.
#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub name: String,
    pub max_abs_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn oracle(name: &str, max_abs_err: f64, tol: f64) -> OracleCheck {
    OracleCheck {
        name: name.to_string(),
        max_abs_err,
        tol,
        pass: max_abs_err < tol,
    }
}

/// Compares the loss implementations against independent scalar loops and the
/// metric against exact set counting.
pub fn run_loss_oracle_suite(seed: u64) -> Vec<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut j_err = 0.0f64;
    let mut h_err = 0.0f64;
    let mut l_err = 0.0f64;
    let cfg = LossConfig::default();

    for _ in 0..100 {
        let n = rng.random_range(1..=32usize);
        let target: Vec<f32> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let pred: Vec<f32> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();

        // scalar loops, f64
        let mut j_ref = 0.0f64;
        let mut h_ref = 0.0f64;
        for i in 0..n {
            let y = target[i] as f64;
            let p = pred[i] as f64;
            j_ref += (y * p + cfg.jaccard_eps) / (y + p - y * p + cfg.jaccard_eps);
            let pc = p.clamp(cfg.bce_eps, 1.0 - cfg.bce_eps);
            h_ref -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        j_ref /= n as f64;
        h_ref /= n as f64;
        let l_ref = cfg.alpha * h_ref + (1.0 - cfg.alpha) * (1.0 - j_ref);

        let pair = MaskPair::new(
            TensorBase::<f32>::from_vec(target, &[n]).unwrap(),
            TensorBase::<f32>::from_vec(pred, &[n]).unwrap(),
        )
        .unwrap();
        j_err = j_err.max((soft_jaccard(&pair, cfg.jaccard_eps).unwrap().item() as f64 - j_ref).abs());
        h_err = h_err.max((bce(&pair, cfg.bce_eps).unwrap().item() as f64 - h_ref).abs());
        l_err = l_err.max((combined_loss(&pair, &cfg).unwrap().item() as f64 - l_ref).abs());
    }

    // Closed-form anchors.
    let anchor_pair = MaskPair::new(
        TensorBase::<f32>::from_vec(vec![1.0], &[1]).unwrap(),
        TensorBase::<f32>::from_vec(vec![0.5], &[1]).unwrap(),
    )
    .unwrap();
    let j_anchor = (soft_jaccard(&anchor_pair, cfg.jaccard_eps).unwrap().item() as f64 - 0.5).abs();
    let h_anchor =
        (bce(&anchor_pair, cfg.bce_eps).unwrap().item() as f64 - std::f64::consts::LN_2).abs();
    let l_anchor = {
        let h = TensorBase::<f32>::from_vec(vec![1.0], &[1]).unwrap();
        let j = TensorBase::<f32>::from_vec(vec![0.0], &[1]).unwrap();
        (crate::tensor::combine_terms(&h, &j, 0.7).unwrap().item() as f64 - 1.0).abs()
    };

    // Metric vs exact set counting on random small masks.
    let mut iou_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=24usize);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mut inter = 0usize;
        let mut uni = 0usize;
        for i in 0..n {
            if a[i] == 1 && b[i] == 1 {
                inter += 1;
            }
            if a[i] == 1 || b[i] == 1 {
                uni += 1;
            }
        }
        let want = if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
        iou_err = iou_err.max((eval_iou(&a, &b).unwrap() - want).abs());
    }
    // Both-empty convention and the hand-counted 1/3 case.
    let empty_err = (eval_iou(&[0, 0, 0], &[0, 0, 0]).unwrap() - 1.0).abs();
    let third_err = (eval_iou(&[1, 1, 0, 0], &[0, 1, 0, 1]).unwrap() - 1.0 / 3.0).abs();

    vec![
        oracle("soft_jaccard_scalar_loop", j_err, ORACLE_TOL),
        oracle("bce_scalar_loop", h_err, ORACLE_TOL),
        oracle("combined_loss_recomposition", l_err, ORACLE_TOL),
        oracle("soft_jaccard_anchor_0.5", j_anchor, ORACLE_TOL),
        oracle("bce_anchor_ln2", h_anchor, ORACLE_TOL),
        oracle("combined_anchor_1.0", l_anchor, ORACLE_TOL),
        oracle("eval_iou_set_counting", iou_err, 0.0_f64.max(f64::MIN_POSITIVE)),
        oracle("eval_iou_both_empty", empty_err, f64::MIN_POSITIVE),
        oracle("eval_iou_hand_third", third_err, 1e-12),
    ]
}

/// Result of a full self check.
pub struct SelfCheckOutcome {
    pub gradient: Vec<OpCheckSummary>,
    pub oracles: Vec<OracleCheck>,
}

impl SelfCheckOutcome {
    pub fn all_pass(&self) -> bool {
        self.gradient.iter().all(|s| s.pass) && self.oracles.iter().all(|o| o.pass)
    }

    /// Name of the first failing check, if any.
    pub fn first_failure(&self) -> Option<&str> {
        self.gradient
            .iter()
            .filter(|s| !s.pass)
            .map(|s| s.name.as_str())
            .chain(self.oracles.iter().filter(|o| !o.pass).map(|o| o.name.as_str()))
            .next()
    }
}

/// Runs the gradient suite over `registry` plus the loss/metric oracles.
pub fn run_selfcheck(registry: &[Box<dyn CheckedOp>], seed: u64) -> SelfCheckOutcome {
    SelfCheckOutcome {
        gradient: run_gradient_suite(registry, 5, GRADCHECK_EPS, GRADCHECK_TOL, seed),
        oracles: run_loss_oracle_suite(seed ^ 0x6f72_6163), // separate stream
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::compare_gradients;

    #[test]
    fn gradient_suite_passes() {
        let reg = registry();
        let results = run_gradient_suite(&reg, 2, GRADCHECK_EPS, GRADCHECK_TOL, 20240601);
        for s in &results {
            assert!(
                s.pass,
                "{}: max_rel_err {} over {} params",
                s.name, s.report.max_rel_err, s.report.num_params_checked
            );
        }
        assert_eq!(results.len(), reg.len());
    }

    #[test]
    fn oracle_suite_passes() {
        for o in run_loss_oracle_suite(7) {
            assert!(o.pass, "{}: abs err {}", o.name, o.max_abs_err);
        }
    }

    #[test]
    fn registry_names_are_unique_and_cover_core_ops() {
        let reg = registry();
        let names: Vec<&str> = reg.iter().map(|o| o.name()).collect();
        let mut dedup = names.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate registry entries");
        for required in [
            "conv2d",
            "conv_transpose2d",
            "maxpool2d",
            "batchnorm2d",
            "relu",
            "sigmoid",
            "concat_channels",
            "add",
            "soft_jaccard",
            "bce",
            "combined_loss",
        ] {
            assert!(names.contains(&required), "missing {required}");
        }
    }

    /// Negative control: an op whose backward is deliberately wrong must fail
    /// the suite and be named.
    struct BrokenConv2d;

    impl CheckedOp for BrokenConv2d {
        fn name(&self) -> &'static str {
            "conv2d"
        }
        fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> GradCheckReport {
            let real = Conv2dCheck.check(rng, eps);
            // Emulate a scale bug in the backward pass: the analytic gradient
            // comes out 5% off everywhere.
            let analytic = vec![vec![1.05]];
            let fd = vec![vec![1.0]];
            let mut report = compare_gradients("conv2d", &analytic, &fd);
            report.num_params_checked = real.num_params_checked;
            report
        }
    }

    #[test]
    fn broken_backward_is_named() {
        let reg: Vec<Box<dyn CheckedOp>> = vec![Box::new(BrokenConv2d), Box::new(ReluCheck)];
        let outcome = run_selfcheck(&reg, 3);
        assert!(!outcome.all_pass());
        assert_eq!(outcome.first_failure(), Some("conv2d"));
    }
}
